use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sepreformer::checkpoint;
use sepreformer::codec::Waveform;
use sepreformer::mixtures::{self, Dataset, Manifest, RowSnr, SourceKind};
use sepreformer::objectives::{self, AuxDomain};
use sepreformer::separator::{ModelConfig, Separator};
use sepreformer::training::{self, TrainConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sepreformer"));
    c.env("RUST_LOG", "warn").env_remove("SEPREFORMER_DATA_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small corpus: 16 one-second sources, short mixtures.
fn make_data(dir: &Path, seed: u64) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "make-data",
        "--out",
        s(&data),
        "--n-sources",
        "16",
        "--source-seconds",
        "1",
        "--train-mixtures",
        "6",
        "--eval-mixtures",
        "3",
        "--segment-samples",
        "2000",
        "--seed",
        &seed.to_string(),
    ]);
    data
}

fn train_args<'a>(data: &'a Path, out: &'a Path, epochs: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--preset",
        "tiny-desk",
        "--data-root",
        s(data),
        "--out",
        s(out),
        "--epochs",
        epochs,
        "--set",
        "train.segment_samples=2000",
    ]
}

#[test]
fn make_data_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let a = make_data(&dir.path().join("a"), 4);
    let b = make_data(&dir.path().join("b"), 4);
    for m in ["train.txt", "val.txt", "test.txt"] {
        assert_eq!(fs::read(a.join(m)).unwrap(), fs::read(b.join(m)).unwrap());
    }
    assert_eq!(fs::read_dir(a.join("sources")).unwrap().count(), 16);
    let c = make_data(&dir.path().join("c"), 5);
    assert_ne!(fs::read(a.join("train.txt")).unwrap(), fs::read(c.join("train.txt")).unwrap());

    let full = dir.path().join("full");
    ok(&[
        "make-data",
        "--out",
        s(&full),
        "--source-seconds",
        "0.5",
        "--train-mixtures",
        "4",
        "--eval-mixtures",
        "2",
        "--segment-samples",
        "1000",
    ]);
    assert_eq!(fs::read_dir(full.join("sources")).unwrap().count(), 64);
    assert!(["train.txt", "val.txt", "test.txt"].iter().all(|m| full.join(m).exists()));
}

#[test]
fn generated_mixtures_obey_the_snr_law() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_data(dir.path(), 0);
    let path = data.join("train.txt");
    let manifest = Manifest::load(&path).unwrap();
    // Mixtures rebuilt from the WAV files realize the SNR written in the manifest.
    let examples = Dataset::from_manifest(&path, 8000, 0).unwrap().examples;
    for (row, ex) in manifest.rows.iter().zip(&examples) {
        let RowSnr::Fixed(snr) = row.snr else {
            panic!("generated manifests carry explicit SNRs")
        };
        assert!((-5.0..=5.0).contains(&snr));
        let measured = 10.0 * (ex.sources[0].power() / ex.sources[1].power()).log10();
        assert!((measured - snr).abs() < 1e-4, "{measured} vs {snr}");
        let sum: Vec<f32> = ex.sources[0].samples.iter().zip(&ex.sources[1].samples).map(|(a, b)| a + b).collect();
        assert_eq!(sum, ex.mixture.samples);
    }
}

#[test]
fn train_smoke_resume_and_ablation_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_data(dir.path(), 1);

    let full = dir.path().join("full");
    ok(&train_args(&data, &full, "5"));
    let log = fs::read_to_string(full.join("metrics.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch ")).count(), 5);
    assert!(!log.contains("NaN") && !log.contains("inf"));
    let echoed = fs::read_to_string(full.join("config.toml")).unwrap();
    assert!(echoed.contains("max_epochs = 5") && echoed.contains("preset = \"tiny-desk\""));
    assert!(full.join("last.ckpt").exists() && full.join("best.ckpt").exists());

    // Two epochs, then resume to five: the log matches the uninterrupted run.
    let part = dir.path().join("part");
    ok(&train_args(&data, &part, "2"));
    let last = part.join("last.ckpt");
    ok(&[
        "train",
        "--resume",
        s(&last),
        "--data-root",
        s(&data),
        "--out",
        s(&part),
        "--epochs",
        "5",
    ]);
    assert_eq!(fs::read_to_string(part.join("metrics.log")).unwrap(), log);

    for mode in ["late_split", "early_split_multi_dec", "essd", "sepre"] {
        let out = dir.path().join(mode);
        let mut args = train_args(&data, &out, "1");
        args.extend(["--decoder-mode", mode]);
        ok(&args);
        let ck = checkpoint::load(&out.join("last.ckpt")).unwrap();
        assert_eq!(ck.model.config.decoder_mode.to_string(), mode);
    }
}

#[test]
fn data_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_data(dir.path(), 2);
    let out = dir.path().join("run");
    let status = bin()
        .env("SEPREFORMER_DATA_ROOT", &data)
        .args(["train", "--preset", "tiny-desk", "--epochs", "1", "--out", s(&out)])
        .args(["--set", "train.segment_samples=2000"])
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn separate_reproduces_an_overfit_pair() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::preset("tiny-desk").unwrap();
    cfg.dropout = 0.0;
    let mut model = Separator::new(cfg, Some(AuxDomain::Time), 0).unwrap();
    let a = mixtures::synth_source(SourceKind::BandNoise { lo: 400.0, hi: 460.0 }, 4000, 8000, 1).unwrap();
    let b = mixtures::synth_source(SourceKind::BandNoise { lo: 1500.0, hi: 1560.0 }, 4000, 8000, 2).unwrap();
    // Peak-normalized so the mixture survives the 16-bit WAV round trip.
    let ex = mixtures::mix_normalized(&a, &b, 0.0).unwrap();
    let rep = training::overfit(&mut model, &ex, &TrainConfig::default(), 1e-3, 400, 10, 22.0).unwrap();
    assert!(rep.steps_to_target.is_some(), "{:?}", rep.history.last());
    let ckpt = dir.path().join("overfit.ckpt");
    checkpoint::save_model(&ckpt, &model).unwrap();
    let input = dir.path().join("mix.wav");
    ex.mixture.write_wav(&input).unwrap();

    let out1 = dir.path().join("sep1");
    let printed = ok(&["separate", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&out1)]);
    let files: Vec<PathBuf> = printed.lines().map(PathBuf::from).collect();
    assert_eq!(files.len(), 2);
    let ests: Vec<Vec<f64>> = files
        .iter()
        .map(|f| Waveform::read_wav(f, 8000).unwrap().to_f64())
        .collect();
    assert!(ests.iter().all(|e| e.len() == 4000));
    let refs: Vec<Vec<f64>> = ex.sources.iter().map(|w| w.to_f64()).collect();
    let m = objectives::pairwise_si_snr(&refs, &ests, 30.0, 1e-8).unwrap();
    let (_, perm) = objectives::best_assignment(&m);
    for (r, &e) in perm.iter().enumerate() {
        assert!(m[r][e] >= 20.0, "speaker {r}: {} dB", m[r][e]);
    }

    let out2 = dir.path().join("sep2");
    ok(&["separate", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&out2)]);
    for f in &files {
        let twin = out2.join(f.file_name().unwrap());
        assert_eq!(fs::read(f).unwrap(), fs::read(twin).unwrap());
    }

    // The probe emits four taps for every decoder unit.
    let csv = dir.path().join("probe.csv");
    ok(&["probe", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut taps = std::collections::BTreeMap::<(String, String), std::collections::BTreeSet<String>>::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        taps.entry((cols[0].into(), cols[1].into())).or_default().insert(cols[2].into());
    }
    let c = &model.config;
    assert_eq!(taps.len(), c.depth * c.dec_blocks);
    assert!(taps.values().all(|t| t.len() == 4));
}

#[test]
fn evaluate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_data(dir.path(), 3);
    let ckpt = dir.path().join("m.ckpt");
    checkpoint::save_model(&ckpt, &Separator::new(ModelConfig::preset("tiny-desk").unwrap(), None, 0).unwrap()).unwrap();
    let out = dir.path().join("eval");
    let manifest = data.join("test.txt");
    let one = ok(&["evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&out)]);
    let two = ok(&["evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--workers", "3"]);
    assert_eq!(one, two);
    assert_eq!(one.lines().count(), 1 + 3 + 1);
    let kv = fs::read_to_string(out.join("metrics.kv")).unwrap();
    assert!(kv.contains("si_snri=") && kv.contains("sdri=") && kv.contains("mixtures=3"));
}

#[test]
fn count_reports_the_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["count", "--preset", "B", "--out", s(dir.path())]);
    assert!(text.contains("14194049"));
    for m in ["codec.encoder", "encoder.stage0", "decoder.stage0", "split", "output", "codec.decoder"] {
        assert!(text.contains(m), "missing {m}");
    }
    let kv = fs::read_to_string(dir.path().join("cost.kv")).unwrap();
    assert!(kv.contains("param_count=14194049") && kv.contains("window=16000"));
    let macs: u64 = kv
        .lines()
        .find_map(|l| l.strip_prefix("macs_per_window="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(macs > 0);

    // A file refined by flags: flags win.
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "preset = \"tiny-desk\"\n[model]\nf = 40\nheads = 4\n").unwrap();
    let a = ok(&["count", "--config", s(&cfg), "--samples", "4000"]);
    let b = ok(&["count", "--config", s(&cfg), "--samples", "4000", "--set", "model.f=32"]);
    let tiny = ok(&["count", "--preset", "tiny-desk", "--samples", "4000"]);
    assert_ne!(a, b);
    assert_eq!(b, tiny);
}

#[test]
fn failures_exit_with_classified_codes() {
    let dir = tempfile::tempdir().unwrap();
    let expect = |args: &[&str], code: i32, kind: &str| {
        let out = run(args);
        assert_eq!(out.status.code(), Some(code), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        let line = err.lines().last().unwrap();
        assert!(line.starts_with(&format!("error kind={kind} reason=")), "{line}");
    };
    expect(&["count", "--set", "model.wide=1"], 2, "config");
    expect(&["count", "--preset", "XL"], 2, "config");
    expect(&["count", "--set", "model.speakers=9"], 2, "config");
    let missing = dir.path().join("none.ckpt");
    expect(&["separate", "--checkpoint", s(&missing), "--input", "x.wav", "--out", s(dir.path())], 3, "data");
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    expect(&["probe", "--checkpoint", s(&bad), "--input", "x.wav"], 3, "data");

    // A model whose weights went non-finite cannot produce a valid estimate.
    let tone = Waveform::new((0..3000).map(|i| 0.3 * (i as f32 * 0.2).sin()).collect(), 8000).unwrap();
    let wav = dir.path().join("t.wav");
    tone.write_wav(&wav).unwrap();
    let mut model = Separator::new(ModelConfig::preset("tiny-desk").unwrap(), None, 0).unwrap();
    let id = model.params.ids().next().unwrap();
    model.params.get_mut(id).data_mut().fill(f32::NAN);
    let ckpt = dir.path().join("nan.ckpt");
    checkpoint::save_model(&ckpt, &model).unwrap();
    let out = dir.path().join("sep");
    expect(&["separate", "--checkpoint", s(&ckpt), "--input", s(&wav), "--out", s(&out)], 4, "numeric");
}
