use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smug_core::denoiser::DenoiserParams;
use tempfile::TempDir;

const TINY: &str = r#"{
  "dataset": {"height": 16, "width": 16, "coils": 2, "n_train": 4, "n_val": 2, "n_test": 2, "acs_rows": 2},
  "denoiser": {"depth": 2, "channels": 4, "kernel_size": 3},
  "recon": {"steps": 2, "samples": 2},
  "train": {"epochs": 2, "decay_start": 1, "samples": 2, "lr_initial": 0.01},
  "attack": {"steps": 2},
  "sweep": {"epsilons": [0.0, 0.004], "unroll_steps": [2, 4]}
}"#;

fn smug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smug"))
        .arg("--threads")
        .arg("1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = smug(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    smug(args).status.code().expect("exit code")
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }

    fn config(&self) -> String {
        self.p("tiny.json")
    }

    fn data(&self) -> String {
        let data = self.p("data");
        if !Path::new(&data).exists() {
            ok(&["generate-data", "--config", &self.config(), "--out", &data]);
        }
        data
    }

    fn pretrain(&self) -> String {
        let out = self.p("pre");
        if !Path::new(&out).exists() {
            ok(&["pretrain", "--config", &self.config(), "--data", &self.data(), "--out", &out]);
        }
        format!("{out}/denoiser.ckpt")
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
    }
    files
}

/// Drops the wall-clock column, the only field that legitimately varies between runs.
fn without_wall_time(log: &str) -> String {
    log.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn generate_data_reports_rate_and_is_reproducible() {
    let ws = Workspace::new();
    let a = ok(&["generate-data", "--config", &ws.config(), "--out", &ws.p("a")]);
    assert!(a.contains("25.0% sampling rate"), "{a}");
    ok(&["generate-data", "--config", &ws.config(), "--out", &ws.p("b")]);
    let files = dir_bytes(Path::new(&ws.p("a")));
    assert_eq!(files.len(), 5);
    assert_eq!(files, dir_bytes(Path::new(&ws.p("b"))));

    ok(&["generate-data", "--config", &ws.config(), "--out", &ws.p("c"), "--seed", "7"]);
    let other = dir_bytes(Path::new(&ws.p("c")));
    assert_ne!(files[Path::new("test.smug")], other[Path::new("test.smug")]);

    let half = ok(&["generate-data", "--config", &ws.config(), "--out", &ws.p("d"), "--acceleration", "2"]);
    assert!(half.contains("50.0% sampling rate"), "{half}");
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let ws = Workspace::new();
    let out = ws.p("zero");
    let stdout = ok(&[
        "pretrain", "--config", &ws.config(), "--data", &ws.data(), "--out", &out, "--epochs", "0",
    ]);
    assert!(stdout.contains("no epochs run"));
    let (params, info) = DenoiserParams::load(format!("{out}/denoiser.ckpt")).unwrap();
    assert_eq!(params.digest(), info["init_digest"]);
    let log = fs::read_to_string(format!("{out}/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn training_logs_every_epoch_and_reruns_identically() {
    let ws = Workspace::new();
    let ckpt = ws.pretrain();
    let log = fs::read_to_string(ws.p("pre/log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,lr,train_loss,val_psnr,val_ssim,wall_time_s"
    );
    assert_eq!(lines.count(), 2);

    let again = ws.p("pre2");
    ok(&["pretrain", "--config", &ws.config(), "--data", &ws.data(), "--out", &again]);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(format!("{again}/denoiser.ckpt")).unwrap());
    assert_eq!(
        without_wall_time(&log),
        without_wall_time(&fs::read_to_string(format!("{again}/log.csv")).unwrap())
    );
}

#[test]
fn resume_checks_config_and_keeps_finished_runs() {
    let ws = Workspace::new();
    let data = ws.data();
    let full = ws.p("full");
    ok(&["pretrain", "--config", &ws.config(), "--data", &data, "--out", &full]);

    let resumed = ws.p("resumed");
    ok(&["pretrain", "--config", &ws.config(), "--data", &data, "--out", &resumed]);
    ok(&["pretrain", "--config", &ws.config(), "--data", &data, "--out", &resumed, "--resume"]);
    assert_eq!(
        fs::read(format!("{full}/denoiser.ckpt")).unwrap(),
        fs::read(format!("{resumed}/denoiser.ckpt")).unwrap()
    );

    assert_eq!(
        code(&[
            "pretrain", "--config", &ws.config(), "--data", &data, "--out", &resumed, "--resume", "--epochs", "3",
        ]),
        1
    );
}

#[test]
fn finetune_rejects_unsmoothed_modes() {
    let ws = Workspace::new();
    let ckpt = ws.pretrain();
    for mode in ["vanilla", "rs-e2e"] {
        let out = smug(&[
            "finetune", "--config", &ws.config(), "--data", &ws.data(), "--init", &ckpt, "--mode", mode, "--out",
            &ws.p("ft"),
        ]);
        assert_eq!(out.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&out.stderr).contains("smoothed unrolled mode"));
    }
}

fn parse_pgm(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    assert_eq!(fields[3], "255");
    let w: usize = fields[1].parse().unwrap();
    let h: usize = fields[2].parse().unwrap();
    let pixels = bytes[pos + 1..].to_vec();
    assert_eq!(pixels.len(), w * h);
    (w, h, pixels)
}

#[test]
fn reconstruct_writes_images_and_metrics() {
    let ws = Workspace::new();
    let ckpt = ws.pretrain();
    let zero = ws.p("sigma0.json");
    fs::write(&zero, TINY.replace(r#""steps": 2, "samples": 2"#, r#""steps": 2, "samples": 2, "sigma": 0.0"#)).unwrap();

    let mut metrics = Vec::new();
    for mode in ["vanilla", "smug"] {
        let out = ws.p(&format!("rec_{mode}"));
        let stdout = ok(&[
            "reconstruct", "--config", &zero, "--data", &ws.data(), "--checkpoint", &ckpt, "--mode", mode, "--out",
            &out,
        ]);
        assert!(stdout.contains("2 test images"), "{stdout}");
        let files = dir_bytes(Path::new(&out));
        assert_eq!(files.keys().filter(|k| k.extension().is_some_and(|e| e == "smug")).count(), 2);
        let pgms: Vec<_> = files.iter().filter(|(k, _)| k.extension().is_some_and(|e| e == "pgm")).collect();
        assert_eq!(pgms.len(), 2);
        for (_, bytes) in pgms {
            let (w, h, pixels) = parse_pgm(bytes);
            assert_eq!((w, h), (16, 16));
            assert!(pixels.iter().any(|&p| p > 0));
        }
        metrics.push(fs::read_to_string(format!("{out}/metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
    assert_eq!(metrics[0].lines().next().unwrap(), "index,psnr,ssim");
}

#[test]
fn reconstruct_refuses_a_mode_the_checkpoint_was_not_trained_for() {
    let ws = Workspace::new();
    let van = ws.p("van");
    ok(&[
        "train", "--config", &ws.config(), "--data", &ws.data(), "--init", &ws.pretrain(), "--mode", "vanilla",
        "--epochs", "1", "--out", &van,
    ]);
    assert_eq!(
        code(&[
            "reconstruct", "--config", &ws.config(), "--data", &ws.data(), "--checkpoint", &format!("{van}/denoiser.ckpt"),
            "--mode", "smug", "--out", &ws.p("rec"),
        ]),
        1
    );
}

#[test]
fn attack_report_and_sweep_outputs() {
    let ws = Workspace::new();
    let ckpt = ws.pretrain();
    let model = format!("vanilla={ckpt}");
    let att = ws.p("att");
    ok(&["attack", "--config", &ws.config(), "--data", &ws.data(), "--model", &model, "--out", &att]);
    let table = fs::read_to_string(format!("{att}/conditions.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);

    let rep = ws.p("rep");
    ok(&["report", "--run", &att, "--out", &rep]);
    let mut rows = csv::Reader::from_path(format!("{rep}/report.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    for record in rows.records() {
        let record = record.unwrap();
        for (h, v) in headers.iter().zip(record.iter()) {
            if h.starts_with("delta_") {
                assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{h}");
            }
        }
    }
    let rep2 = ws.p("rep2");
    ok(&["report", "--run", &att, "--out", &rep2]);
    assert_eq!(dir_bytes(Path::new(&rep)), dir_bytes(Path::new(&rep2)));
    assert_eq!(code(&["report", "--run", &att, "--out", &ws.p("rep3"), "--baseline", "smug"]), 1);

    let other = ws.p("other_data");
    ok(&["generate-data", "--config", &ws.config(), "--out", &other, "--seed", "9"]);
    let att_other = ws.p("att_other");
    ok(&["attack", "--config", &ws.config(), "--data", &other, "--model", &format!("smug={ckpt}"), "--out", &att_other]);
    let mixed = smug(&["report", "--run", &att, "--run", &att_other, "--out", &ws.p("rep4")]);
    assert_eq!(mixed.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mixed.stderr).contains("different test set"));

    let sw = ws.p("sweep");
    ok(&["sweep", "--config", &ws.config(), "--data", &ws.data(), "--model", &model, "--axis", "unroll-steps", "--out", &sw]);
    let sweep = fs::read_to_string(format!("{sw}/sweep_unroll_steps.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["generate-data"]), 1);

    let bad = ws.p("bad.json");
    fs::write(&bad, r#"{"recon": {"stpes": 3}}"#).unwrap();
    assert_eq!(code(&["generate-data", "--config", &bad, "--out", &ws.p("x")]), 1);
    fs::write(&bad, r#"{"dataset": {"acceleration": 0}}"#).unwrap();
    assert_eq!(code(&["generate-data", "--config", &bad, "--out", &ws.p("y")]), 1);

    let data = ws.data();
    assert_eq!(code(&["generate-data", "--config", &ws.config(), "--out", &data]), 1);
    assert_eq!(code(&["generate-data", "--config", &ws.config(), "--out", &data, "--force"]), 0);
    assert_eq!(code(&["--threads", "0", "generate-data", "--out", &ws.p("z")]), 1);

    let junk = ws.p("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(
        code(&["reconstruct", "--config", &ws.config(), "--data", &data, "--checkpoint", &junk, "--out", &ws.p("r")]),
        2
    );
}
