use std::path::Path;
use std::process::{Command, Output};

fn kvlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvlab")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const HEADER: &str = "method,depth,alpha_0,alpha_1,alpha_2,alpha_3,alpha_4,alpha_5,alpha_6,retention,mat,tree_mat";

fn write_report(path: &Path) {
    let text = format!(
        "{HEADER}\nEAGLE-3,1,0.638,0.566,0.533,0.511,0.495,0.481,0.469,0.735,2.37,\n\
         Gated KV (ckpt),1,0.665,0.603,0.573,0.553,0.537,0.525,0.514,0.773,2.54,\n"
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn report_prints_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    write_report(&csv);
    let csv = csv.to_str().unwrap();
    let o = kvlab(&["report", csv, "--baseline", "EAGLE-3", "--method", "Gated KV (ckpt)"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("+0.170"), "{out}");
    assert!(out.contains("+0.027"), "{out}");
    let o = kvlab(&["report", csv, csv]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).matches("+0.000").count(), 2 * 9);
}

#[test]
fn errors_use_one_line_format() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = kvlab(&["report", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: kind=io message="), "{err}");
    assert_eq!(err.lines().count(), 1);

    let csv = dir.path().join("m.csv");
    write_report(&csv);
    let o = kvlab(&["report", csv.to_str().unwrap(), "--baseline", "EAGLE-3", "--method", "nothing"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=not_found message="));

    let o = kvlab(&["run-plan", "--plan", "unknown"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=not_found"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[target]\nd_model = \"wide\"\n").unwrap();
    let o = kvlab(&["run-plan", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=config"));

    let o = kvlab(&["train-drafter", "--plan", "depth", "--mode", "kv_only", "--tree", "2,1,1"]);
    assert_eq!(o.status.code(), Some(2), "bad flag values are usage errors");
}

#[test]
fn show_plan_round_trips() {
    let o = kvlab(&["show-plan", "--plan", "fusion", "--seed", "9"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("seed = 9"));
    assert!(text.contains("warm_start = \"EAGLE-3\""));
    let o = kvlab(&["show-plan", "--mode", "kv_only", "--depth", "2", "--offline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("name = \"kv-d2-linproj-rope-offline\""), "{text}");
    assert!(text.contains("online = false"));
}

const TINY: &str = r#"
name = "tiny"
seed = 1

[corpus]
size = 40
seq_len = 40

[target]
d_model = 16
n_layers = 3
n_heads = 2
d_kv = 4
d_ff = 32
max_seq_len = 48

[target_train]
steps = 5
batch = 2

[ttt]
k = 3
steps = 2
batch = 1

[eval]
prompts = 2
prompt_len = 6
gen_tokens = 6
chain_depth = 3

[eval.tree]
depth = 2
topk = 2
budget = 4

[[drafters]]
name = "base"
mode = "hidden_only"

[[drafters]]
name = "kv"
mode = "kv_only"
depth = 2
"#;

#[test]
fn tiny_plan_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("tiny.toml");
    std::fs::write(&plan, TINY).unwrap();
    let out = dir.path().join("run");
    let (plan, out_s) = (plan.to_str().unwrap(), out.to_str().unwrap());

    let o = kvlab(&["eval", "--config", plan, "--out", out_s]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=not_found"));

    let o = kvlab(&["train-target", "--config", plan, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("target.ckpt").exists());

    let o = kvlab(&["run-plan", "--config", plan, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("target: reusing checkpoint"));
    let csv = out.join("metrics.csv");
    assert_eq!(stdout(&o).trim(), csv.to_str().unwrap());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with(HEADER));
    assert_eq!(text.lines().count(), 3);

    let o = kvlab(&["eval", "--config", plan, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!stderr(&o).contains("training"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), text);
}
