use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use exemplar_inpaint::checkpoint;
use exemplar_inpaint::config::Config;
use exemplar_inpaint::data::{self, Dataset};
use exemplar_inpaint::evaluation::EvalReport;
use exemplar_inpaint::masks::BinaryMask;
use exemplar_inpaint::training::{Model, TrainState};

const SIDE: usize = 16;

fn exe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exinpaint")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn tiny_config(dir: &Path, total_steps: u64) -> PathBuf {
    let mut c = Config::toy(SIDE);
    c.apply_overrides(&[
        "frozen.encoder_pretrain_steps=3",
        "frozen.identity_pretrain_steps=3",
        "train.batch_size=2",
        "train.checkpoint_every=5",
        "r1.interval=4",
        "data.synthetic_images=24",
        "data.synthetic_identities=6",
        "data.holdout_images=8",
    ])
    .unwrap();
    c.train.total_steps = total_steps;
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, c.to_text()).unwrap();
    path
}

fn logged_steps(run: &Path) -> Vec<u64> {
    let text = std::fs::read_to_string(run.join("losses.ndjson")).unwrap();
    let mut steps: Vec<u64> =
        text.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap()).collect();
    steps.dedup();
    steps
}

#[test]
fn usage_and_config_errors_have_distinct_exit_codes() {
    let out = exe(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(exe(&[]).status.code(), Some(2));
    assert_eq!(exe(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    assert_eq!(exe(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(3));
    let cfg = tiny_config(dir.path(), 1);
    let out = exe(&["train", "--config", cfg.to_str().unwrap(), "--set", "train.bogus=1"]);
    assert_eq!(out.status.code(), Some(3));
    let out = exe(&["train", "--config", cfg.to_str().unwrap(), "--set", "train.tau=2"]);
    assert_eq!(out.status.code(), Some(3));
    let run = dir.path().join("run");
    let out = exe(&["train", "--config", cfg.to_str().unwrap(), "--run-dir", run.to_str().unwrap(), "--resume"]);
    assert_eq!(out.status.code(), Some(4));
    let out = exe(&["mask-gen", "--kind", "0.9-0.2", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn smoke_training_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 10);
    let run = dir.path().join("run");
    let (c, r) = (cfg.to_str().unwrap(), run.to_str().unwrap());
    let out = exe(&["train", "--config", c, "--run-dir", r]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "latest.safetensors",
        "checkpoint-00000000.safetensors",
        "checkpoint-00000005.safetensors",
        "checkpoint-00000010.safetensors",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert_eq!(logged_steps(&run), (0..10).collect::<Vec<_>>());

    let out = exe(&["train", "--config", c, "--run-dir", r, "--resume", "--set", "train.total_steps=13"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(checkpoint::load(run.join("latest.safetensors")).unwrap().step, 13);
    assert_eq!(logged_steps(&run), (0..13).collect::<Vec<_>>());

    let report_path = dir.path().join("report.txt");
    let ck = run.join("latest.safetensors");
    let out = exe(&[
        "evaluate",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--samples",
        "6",
        "--batch",
        "4",
        "--output",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: EvalReport = std::fs::read_to_string(&report_path).unwrap().parse().unwrap();
    assert_eq!(report.bins.len(), 7);
    assert!(report.bins.iter().all(|b| b.fid.is_finite() && b.count == 6));
}

struct InferFixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl InferFixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut cfg = Config::toy(SIDE);
        cfg.apply_overrides(&["frozen.encoder_pretrain_steps=0", "frozen.identity_pretrain_steps=0"]).unwrap();
        let state = TrainState::new(Model::build(&cfg).unwrap(), 4);
        checkpoint::save(&state, root.join("model.safetensors")).unwrap();
        let faces = Dataset::synthetic(SIDE, 0, 3, 2, 9).unwrap();
        for i in 0..3 {
            std::fs::write(root.join(format!("face{i}.png")), data::encode_png(faces.image(i), SIDE).unwrap()).unwrap();
        }
        BinaryMask::zeros(SIDE, SIDE).save_png(root.join("empty.png")).unwrap();
        let mut hole = BinaryMask::zeros(SIDE, SIDE);
        for y in 5..12 {
            for x in 2..9 {
                hole.set(y, x, true);
            }
        }
        hole.save_png(root.join("hole.png")).unwrap();
        Self { _dir: dir, root }
    }

    fn p(&self, name: &str) -> String {
        self.root.join(name).to_str().unwrap().to_string()
    }

    fn infer(&self, mask: &str, out: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "infer".to_string(),
            "--checkpoint".into(),
            self.p("model.safetensors"),
            "--input".into(),
            self.p("face0.png"),
            "--exemplar".into(),
            self.p("face1.png"),
            "--mask".into(),
            self.p(mask),
            "--output".into(),
            self.p(out),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        exe(&refs)
    }

    fn rgb(&self, name: &str) -> Vec<u8> {
        image::open(self.root.join(name)).unwrap().to_rgb8().into_raw()
    }
}

#[test]
fn infer_respects_the_mask_and_the_seed() {
    let fx = InferFixture::new();
    assert_eq!(fx.infer("empty.png", "same.png", &[]).status.code(), Some(0));
    assert_eq!(fx.rgb("same.png"), fx.rgb("face0.png"));

    for (out, seed) in [("a.png", "1"), ("b.png", "1"), ("c.png", "2")] {
        let o = fx.infer("hole.png", out, &["--seed", seed, "--psi", "0.7"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(fx.root.join("a.png")).unwrap(), std::fs::read(fx.root.join("b.png")).unwrap());
    let (a, c) = (fx.rgb("a.png"), fx.rgb("c.png"));
    assert_ne!(a, c);
    for (i, (x, y)) in a.iter().zip(&c).enumerate() {
        let (py, px) = ((i / 3) / SIDE, (i / 3) % SIDE);
        let in_hole = (5..12).contains(&py) && (2..9).contains(&px);
        assert!(in_hole || x == y, "pixel ({py}, {px}) differs outside the mask");
    }

    let layers = Config::toy(SIDE).model.num_layers();
    let mix = fx.infer("hole.png", "mix.png", &["--exemplar2", &fx.p("face2.png"), "--range", &format!("1,{layers}")]);
    assert_eq!(mix.status.code(), Some(0), "{}", String::from_utf8_lossy(&mix.stderr));
    let single = Command::new(env!("CARGO_BIN_EXE_exinpaint"))
        .args(["infer", "--checkpoint", &fx.p("model.safetensors"), "--input", &fx.p("face0.png")])
        .args(["--exemplar", &fx.p("face2.png"), "--mask", &fx.p("hole.png"), "--output", &fx.p("single.png")])
        .output()
        .unwrap();
    assert_eq!(single.status.code(), Some(0));
    assert_eq!(fx.rgb("mix.png"), fx.rgb("single.png"));

    assert_eq!(fx.infer("hole.png", "x.png", &["--psi", "1.5"]).status.code(), Some(2));
    assert_eq!(fx.infer("hole.png", "x.png", &["--phi", "11"]).status.code(), Some(2));
    assert_eq!(fx.infer("hole.png", "x.png", &["--range", "1,3"]).status.code(), Some(2));
}

#[test]
fn mask_gen_writes_binned_masks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("masks");
    let o = exe(&[
        "mask-gen",
        "--resolution",
        "32",
        "--count",
        "5",
        "--kind",
        "0.3-0.4",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    for i in 0..5 {
        let m = BinaryMask::load_png(out.join(format!("mask_{i:05}.png"))).unwrap();
        assert_eq!((m.height(), m.width()), (32, 32));
        assert!((0.3..0.4).contains(&m.masked_ratio()));
    }
    let o = exe(&["config", "--preset", "toy", "--resolution", "32"]);
    assert_eq!(o.status.code(), Some(0));
    let cfg = Config::parse_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg, Config::toy(32));
}
