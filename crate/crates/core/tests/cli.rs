use std::path::Path;
use std::process::{Command, Output};

fn mpt(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mpt"))
        .args(args)
        .current_dir(dir)
        .env("MPT_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run mpt");
    assert!(
        out.status.success(),
        "mpt {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn generate_pretrain_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = mpt(&["generate", "--meshes", "4", "--views", "2", "--seed", "3", "--out", "train"], d);
    assert!(stdout(&gen).contains("8 records"), "{}", stdout(&gen));
    mpt(&["generate", "--meshes", "2", "--views", "1", "--seed", "3", "--out", "eval", "--held-out", "--full-vertices"], d);

    let shard = stdout(&mpt(&["inspect", "train/shard-00000.mpt"], d));
    assert!(shard.contains("Shard") && shard.contains("rig: 2 camera(s)"), "{shard}");

    std::fs::write(
        d.join("tiny.cfg"),
        "block_hidden_sizes = 8\nlayers_per_block = 1\nheads_per_block = 2\nmlp_ratio = 2\n\
         upsampler_hidden = 4\ndesk_scale = off\nbatch_size = 4\nmax_steps = 50\nmhm = on\n",
    )
    .unwrap();
    let train = stdout(&mpt(
        &["pretrain", "--data", "train", "--config", "tiny.cfg", "--mhm", "off", "--set", "max_steps=3", "--out", "run/model.ckpt"],
        d,
    ));
    assert!(train.contains("finished step 3/3"), "{train}");
    let log = std::fs::read_to_string(d.join("run/model.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step,l_v,l_j,l_j_reg,l_j_proj,total,lr"));

    let ckpt = stdout(&mpt(&["inspect", "run/model.ckpt"], d));
    assert!(ckpt.contains("mhm = off") && ckpt.contains("max_steps = 3"), "{ckpt}");

    let eval = stdout(&mpt(&["eval", "--ckpt", "run/model.ckpt", "--data", "eval", "--per-sample", "per.csv"], d));
    assert!(eval.starts_with("mpjpe_mm,pa_mpjpe_mm,mpve_mm,samples"), "{eval}");
    let per = std::fs::read_to_string(d.join("per.csv")).unwrap();
    assert_eq!(per.lines().count(), 3);
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mpt"))
        .args(["generate", "--meshes", "2", "--views", "3", "--out", "x"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_mpt"))
        .args(["eval", "--ckpt", "missing.ckpt", "--data", "nowhere"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
}
