use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const TOPICS: [&str; 4] = ["chess", "math", "guitar", "french"];
const TEMPLATES: [&str; 3] = ["how do i learn {} ?", "how can i get better at {} ?", "what is the best way to learn {} ?"];

fn paragen(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_paragen"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut pipe = child.stdin.take().unwrap();
    if let Some(text) = stdin {
        pipe.write_all(text.as_bytes()).unwrap();
    }
    drop(pipe);
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

fn write_pairs(path: &Path) {
    let mut text = String::new();
    let fill = |t: &str, topic: &str| t.replace("{}", topic);
    for (i, topic) in TOPICS.iter().enumerate() {
        for a in 0..TEMPLATES.len() {
            let b = (a + 1) % TEMPLATES.len();
            text += &format!("{}\t{}\t1\n", fill(TEMPLATES[a], topic), fill(TEMPLATES[b], topic));
            let other = TOPICS[(i + 1) % TOPICS.len()];
            text += &format!("{}\t{}\t0\n", fill(TEMPLATES[a], topic), fill(TEMPLATES[b], other));
        }
    }
    std::fs::write(path, text).unwrap();
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    write_pairs(&dir.join("pairs.tsv"));
    std::fs::write(dir.join("syn.txt"), "learn\tstudy\n").unwrap();
    let cfg = "\
# tiny run
seed = 3
batch_size = 4
max_len = 10
embed_dim = 8
hidden = 8
pattern_dim = 4
critic_layers = 2
critic_growth = 2
critic_mlp_hidden = 8
pretrain_steps_ae = 4
pretrain_steps_trs = 4
adv_steps = 3
checkpoint_every = 2
raw_pairs = pairs.tsv
test_pairs = pairs.tsv
synonyms = syn.txt
work_dir = run
";
    let path = dir.join("tiny.conf");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = paragen(&["pretrain", "--config", "/nonexistent/paragen.conf"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/paragen.conf"));
}

#[test]
fn unknown_verbs_and_flags_are_usage_errors() {
    assert_eq!(paragen(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(paragen(&["train", "--config", "x", "--bogus"], None).status.code(), Some(1));
    assert_eq!(paragen(&[], None).status.code(), Some(1));
    assert_eq!(paragen(&["--help"], None).status.code(), Some(0));
}

#[test]
fn bad_config_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    std::fs::write(&path, "no_such_key = 1\n").unwrap();
    let o = paragen(&["preprocess", "--config", path.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such_key"));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path());
    // Nothing has been preprocessed yet, so the vocabulary is missing.
    let o = paragen(&["pretrain", "--config", conf.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("vocab.txt"));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path());
    let conf = conf.to_str().unwrap();
    let inputs_before = (
        std::fs::read(dir.path().join("pairs.tsv")).unwrap(),
        std::fs::read(dir.path().join("tiny.conf")).unwrap(),
    );
    let run = dir.path().join("run");

    let o = paragen(&["preprocess", "--config", conf], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("# config_hash="));
    assert!(out.contains("pairs\t24\t"));
    assert!(run.join("vocab.txt").exists() && run.join("corpus.tsv").exists());

    let o = paragen(&["pretrain", "--config", conf], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("autoencoder\t4\t"));
    assert!(run.join("pretrained.ckpt").exists());

    let o = paragen(&["train", "--config", conf], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("# checkpoint="));
    assert!(run.join("checkpoint-000002.ckpt").exists());
    assert!(run.join("final.ckpt").exists());
    assert_eq!(std::fs::read_to_string(run.join("metrics.tsv")).unwrap().lines().count(), 4);

    let gen = || paragen(&["generate", "--config", conf, "--samples", "3", "--seed", "7"], Some("how do i learn chess ?\n"));
    let first = gen();
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let text = stdout(&first);
    assert!(text.contains("# seed=7\n"));
    assert!(text.contains("# checkpoint="));
    let lines = data_lines(&text);
    assert_eq!(lines.len(), 3, "{text}");
    for (k, line) in lines.iter().enumerate() {
        assert!(line.starts_with(&format!("0\t{k}\t")), "{line}");
        assert!(line.split('\t').nth(2).unwrap().split_whitespace().count() <= 11);
    }
    assert_eq!(stdout(&gen()), text);

    let o = paragen(&["generate", "--config", conf, "--samples", "2"], Some("learn math\nhow can i get better at guitar ?\n"));
    assert_eq!(data_lines(&stdout(&o)).len(), 4);

    let o = paragen(&["evaluate", "--config", conf, "--samples", "1"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = stdout(&o);
    assert!(report.contains("# K=1 inputs=12"), "{report}");
    let rows: Vec<&str> = data_lines(&report);
    assert_eq!(rows[0], "metric\taverage\tbest");
    assert_eq!(rows.len(), 5);
    for row in &rows[1..] {
        let f: Vec<&str> = row.split('\t').collect();
        assert_eq!(f[1], f[2], "{row}");
    }

    let o = paragen(&["evaluate", "--config", conf, "--samples", "3"], None);
    for row in &data_lines(&stdout(&o))[1..] {
        let f: Vec<f64> = row.split('\t').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!(f[1] >= f[0], "{row}");
    }

    let missing = paragen(&["generate", "--config", conf, "--checkpoint", "/nonexistent.ckpt"], Some("x\n"));
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("/nonexistent.ckpt"));

    let inputs_after = (
        std::fs::read(dir.path().join("pairs.tsv")).unwrap(),
        std::fs::read(dir.path().join("tiny.conf")).unwrap(),
    );
    assert_eq!(inputs_before, inputs_after);
}
