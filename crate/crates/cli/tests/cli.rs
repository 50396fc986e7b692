//! End-to-end tests of the `cohort-norm` binary: every subcommand, the
//! documented reduction identities, the exit-code contract, config-file
//! precedence, and determinism of generation/training.

use std::path::{Path, PathBuf};
use std::process::Command;

use cohort_norm::io::{load_checkpoint, read_bank, EmbeddingStore};
use cohort_norm::metrics::{cllr_metric, eer, format_sig9, min_dcf, DcfParams, ScoredTrialSet};
use cohort_norm::types::average_enrollment;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cohort-norm")
}

/// Run the binary in `dir`; return (stdout, stderr, exit code).
fn run_in(dir: &Path, args: &[&str]) -> (String, String, i32) {
    run_with_env(dir, args, &[])
}

fn run_with_env(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> (String, String, i32) {
    let mut cmd = Command::new(bin());
    cmd.current_dir(dir).args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    (
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
        out.status.code().unwrap_or(-1),
    )
}

fn ok_in(dir: &Path, args: &[&str]) -> String {
    let (stdout, stderr, code) = run_in(dir, args);
    assert_eq!(code, 0, "args {args:?}\nstdout: {stdout}\nstderr: {stderr}");
    stdout
}

/// Standard tiny corpus shared by most tests: 24 cohort + 8 eval speakers.
fn gen_tiny(dir: &Path) {
    ok_in(
        dir,
        &[
            "gen-synth",
            "--out",
            "synth.cnrm",
            "--speakers",
            "24",
            "--eval-speakers",
            "8",
            "--utts",
            "4",
            "--dim",
            "16",
            "--non-per-speaker",
            "6",
            "--seed",
            "5",
        ],
    );
}

fn init_bank(dir: &Path, subcenters: &str, out: &str) {
    ok_in(
        dir,
        &[
            "init",
            "--embeddings",
            "synth.cnrm",
            "--manifest",
            "synth.split.txt",
            "--subcenters",
            subcenters,
            "--out",
            out,
        ],
    );
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn gen_synth_is_deterministic_and_reports_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let stdout = ok_in(a.path(), &["gen-synth", "--out", "synth.cnrm", "--speakers", "10", "--eval-speakers", "4", "--utts", "3", "--dim", "8", "--seed", "9"]);
    assert!(stdout.contains("archive  synth.cnrm"), "{stdout}");
    assert!(stdout.contains("split    synth.split.txt"), "{stdout}");
    assert!(stdout.contains("trials   synth.trials.txt"), "{stdout}");
    ok_in(b.path(), &["gen-synth", "--out", "synth.cnrm", "--speakers", "10", "--eval-speakers", "4", "--utts", "3", "--dim", "8", "--seed", "9"]);
    for f in ["synth.cnrm", "synth.split.txt", "synth.trials.txt"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs across runs");
    }
}

#[test]
fn gen_synth_rejects_dim_one_with_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let (_, stderr, code) = run_in(d.path(), &["gen-synth", "--out", "x.cnrm", "--dim", "1"]);
    assert_eq!(code, 2);
    assert!(stderr.contains("dim"), "{stderr}");
}

#[test]
fn init_writes_a_loadable_bank_and_reports_shape() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    let stdout = ok_in(
        d.path(),
        &["init", "--embeddings", "synth.cnrm", "--manifest", "synth.split.txt", "--subcenters", "2", "--out", "bank.cnbk"],
    );
    assert!(stdout.contains("bank  bank.cnbk  (24 speakers x 2 sub-centers x dim 16)"), "{stdout}");
    let bank = read_bank(&d.path().join("bank.cnbk")).unwrap();
    assert_eq!((bank.len(), bank.n_sub(), bank.dim()), (24, 2, 16));
}

#[test]
fn score_none_matches_library_cosine_bytewise() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    ok_in(
        d.path(),
        &["score", "--method", "none", "--embeddings", "synth.cnrm", "--trials", "synth.trials.txt", "--out", "cli.scores"],
    );

    let store = EmbeddingStore::load(&d.path().join("synth.cnrm")).unwrap();
    let trials = cohort_norm::io::parse_trials(&d.path().join("synth.trials.txt")).unwrap();
    let scores: Vec<f64> = trials
        .iter()
        .map(|t| {
            let embs: Vec<_> = t.enroll_ids.iter().map(|id| store.get(id).unwrap().clone()).collect();
            let e = average_enrollment(&embs).unwrap();
            cohort_norm::scoring::cosine(&e, store.get(&t.test_id).unwrap()).unwrap()
        })
        .collect();
    cohort_norm::io::write_scores(&d.path().join("lib.scores"), &trials, &scores).unwrap();
    assert_eq!(read(d.path(), "cli.scores"), read(d.path(), "lib.scores"));
}

#[test]
fn asnorm1_at_full_cohort_equals_snorm() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    init_bank(d.path(), "1", "bank.cnbk");
    ok_in(d.path(), &["score", "--method", "snorm", "--cohort", "bank.cnbk", "--embeddings", "synth.cnrm", "--trials", "synth.trials.txt", "--out", "sn.scores"]);
    ok_in(d.path(), &["score", "--method", "asnorm1", "--cohort", "bank.cnbk", "--embeddings", "synth.cnrm", "--trials", "synth.trials.txt", "--k", "24", "--out", "as1.scores"]);
    assert_eq!(read(d.path(), "sn.scores"), read(d.path(), "as1.scores"));
}

#[test]
fn untrained_lie_tas_equals_asnorm1() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    init_bank(d.path(), "2", "bank.cnbk");
    ok_in(d.path(), &["score", "--method", "asnorm1", "--cohort", "bank.cnbk", "--embeddings", "synth.cnrm", "--trials", "synth.trials.txt", "--k", "8", "--out", "as1.scores"]);
    ok_in(d.path(), &["score", "--method", "lie_tas", "--cohort", "bank.cnbk", "--embeddings", "synth.cnrm", "--trials", "synth.trials.txt", "--k", "8", "--out", "lie.scores"]);
    assert_eq!(read(d.path(), "as1.scores"), read(d.path(), "lie.scores"));
}

#[test]
fn train_zero_epochs_exports_the_input_bank() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    init_bank(d.path(), "2", "bank.cnbk");
    ok_in(d.path(), &["train", "--embeddings", "synth.cnrm", "--bank", "bank.cnbk", "--out", "ckpt.cnck", "--epochs", "0", "--k", "8", "--spb", "12"]);
    let before = read_bank(&d.path().join("bank.cnbk")).unwrap();
    let after = read_bank(&d.path().join("ckpt.cnbk")).unwrap();
    let bits = |b: &cohort_norm::types::ImpostorBank| {
        b.centers().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(bits(&before), bits(&after));
}

#[test]
fn train_loss_trend_descends_at_the_pinned_seed() {
    let d = tempfile::tempdir().unwrap();
    ok_in(d.path(), &["gen-synth", "--out", "t.cnrm", "--speakers", "40", "--eval-speakers", "10", "--utts", "6", "--dim", "16", "--within", "0.20", "--shift", "0.10", "--non-per-speaker", "10", "--seed", "11"]);
    ok_in(d.path(), &["init", "--embeddings", "t.cnrm", "--manifest", "t.split.txt", "--subcenters", "2", "--out", "tb.cnbk"]);
    let stdout = ok_in(d.path(), &["train", "--embeddings", "t.cnrm", "--bank", "tb.cnbk", "--out", "tt.cnck", "--epochs", "9", "--k", "10", "--spb", "20", "--lr", "3e-3", "--seed", "7"]);
    let losses: Vec<f64> = stdout
        .lines()
        .filter(|l| l.trim_start().starts_with("epoch"))
        .map(|l| {
            let fields: Vec<&str> = l.split_whitespace().collect();
            let at = fields.iter().position(|f| *f == "loss").unwrap();
            fields[at + 1].parse().unwrap()
        })
        .collect();
    assert_eq!(losses.len(), 9, "{stdout}");
    let median = |w: &[f64]| {
        let mut v = w.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    assert!(
        median(&losses[6..]) < median(&losses[..3]),
        "loss trend not descending: {losses:?}"
    );
}

#[test]
fn lwb_training_moves_gates_but_not_the_bank() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    init_bank(d.path(), "2", "bank.cnbk");
    ok_in(d.path(), &["train", "--embeddings", "synth.cnrm", "--bank", "bank.cnbk", "--out", "lwb.cnck", "--epochs", "2", "--k", "8", "--spb", "12", "--variant", "lwb", "--lr", "1e-2"]);
    let before = read_bank(&d.path().join("bank.cnbk")).unwrap();
    let after = read_bank(&d.path().join("lwb.cnbk")).unwrap();
    let bits = |b: &cohort_norm::types::ImpostorBank| {
        b.centers().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(bits(&before), bits(&after), "lwb must not touch the bank");
    let ckpt = load_checkpoint(&d.path().join("lwb.cnck")).unwrap();
    assert_ne!(ckpt.lwb.as_array(), [1.0, 0.0, 1.0, 0.0], "gates must have trained");
}

#[test]
fn resume_reproduces_the_uninterrupted_run_bytewise() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    init_bank(d.path(), "2", "bank.cnbk");
    let flags = ["--embeddings", "synth.cnrm", "--k", "8", "--spb", "12", "--seed", "1"];
    let mut full: Vec<&str> = vec!["train", "--bank", "bank.cnbk", "--out", "full.cnck", "--epochs", "4"];
    full.extend_from_slice(&flags);
    ok_in(d.path(), &full);
    let mut half: Vec<&str> = vec!["train", "--bank", "bank.cnbk", "--out", "half.cnck", "--epochs", "2"];
    half.extend_from_slice(&flags);
    ok_in(d.path(), &half);
    ok_in(d.path(), &["train", "--embeddings", "synth.cnrm", "--bank", "half.cnck", "--out", "resumed.cnck", "--epochs", "4"]);
    assert_eq!(read(d.path(), "full.cnck"), read(d.path(), "resumed.cnck"));

    // Hyperparameters are frozen by the checkpoint.
    let (_, stderr, code) = run_in(d.path(), &["train", "--embeddings", "synth.cnrm", "--bank", "half.cnck", "--out", "x.cnck", "--epochs", "4", "--lr", "0.1"]);
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn same_seed_training_twice_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    init_bank(d.path(), "2", "bank.cnbk");
    for out in ["a.cnck", "b.cnck"] {
        ok_in(d.path(), &["train", "--embeddings", "synth.cnrm", "--bank", "bank.cnbk", "--out", out, "--epochs", "3", "--k", "8", "--spb", "12", "--seed", "42"]);
    }
    assert_eq!(read(d.path(), "a.cnck"), read(d.path(), "b.cnck"));
}

#[test]
fn score_then_eval_matches_the_compare_row() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    init_bank(d.path(), "1", "bank.cnbk");
    ok_in(d.path(), &["score", "--method", "asnorm1", "--cohort", "bank.cnbk", "--embeddings", "synth.cnrm", "--trials", "synth.trials.txt", "--k", "8", "--out", "as1.scores"]);
    let eval_out = ok_in(d.path(), &["eval", "--scores", "as1.scores", "--trials", "synth.trials.txt"]);
    let metric = |name: &str| -> String {
        eval_out
            .lines()
            .find(|l| l.starts_with(name))
            .unwrap_or_else(|| panic!("no {name} in {eval_out}"))
            .split_whitespace()
            .nth(1)
            .unwrap()
            .to_string()
    };

    let cmp_out = ok_in(d.path(), &["compare", "--embeddings", "synth.cnrm", "--manifest", "synth.split.txt", "--trials", "synth.trials.txt", "--methods", "asnorm1", "--k-sweep", "8"]);
    let row: Vec<&str> = cmp_out
        .lines()
        .find(|l| l.starts_with("asnorm1"))
        .unwrap_or_else(|| panic!("no asnorm1 row in {cmp_out}"))
        .split_whitespace()
        .collect();
    assert_eq!(row[1], "8");
    assert_eq!(row[2], metric("eer_pct"));
    assert_eq!(row[3], metric("min_dcf"));
    assert_eq!(row[4], metric("cllr"));
}

#[test]
fn eval_six_trial_fixture_matches_the_metric_oracles() {
    // Same six scores the metrics module pins against its enumeration
    // oracle: targets {0.82, 0.41, 0.67}, non-targets {0.55, 0.12, 0.44}.
    let d = tempfile::tempdir().unwrap();
    let tar = [0.82, 0.41, 0.67];
    let non = [0.55, 0.12, 0.44];
    let mut trials = String::new();
    let mut scores = String::new();
    for (i, s) in tar.iter().enumerate() {
        trials.push_str(&format!("1 e{i} t{i}\n"));
        scores.push_str(&format!("e{i} t{i} {s}\n"));
    }
    for (i, s) in non.iter().enumerate() {
        trials.push_str(&format!("0 e{i} n{i}\n"));
        scores.push_str(&format!("e{i} n{i} {s}\n"));
    }
    std::fs::write(d.path().join("six.trials.txt"), trials).unwrap();
    std::fs::write(d.path().join("six.scores"), scores).unwrap();

    let set = ScoredTrialSet::new(
        tar.iter().chain(non.iter()).cloned().collect(),
        vec![true, true, true, false, false, false],
    )
    .unwrap();
    let p = DcfParams::default();
    let stdout = ok_in(d.path(), &["eval", "--scores", "six.scores", "--trials", "six.trials.txt"]);
    assert!(stdout.contains(&format!("eer_pct  {}", format_sig9(eer(&set).unwrap() * 100.0))), "{stdout}");
    assert!(stdout.contains(&format!("min_dcf  {}", format_sig9(min_dcf(&set, &p).unwrap()))), "{stdout}");
    assert!(stdout.contains(&format!("cllr     {}", format_sig9(cllr_metric(&set).unwrap()))), "{stdout}");
}

#[test]
fn eval_perfect_separation_reports_zero_error() {
    let d = tempfile::tempdir().unwrap();
    let trials = "1 e0 t0\n1 e1 t1\n0 e0 n0\n0 e1 n1\n";
    let scores = "e0 t0 5.0\ne1 t1 4.0\ne0 n0 -4.0\ne1 n1 -5.0\n";
    std::fs::write(d.path().join("p.trials.txt"), trials).unwrap();
    std::fs::write(d.path().join("p.scores"), scores).unwrap();
    let stdout = ok_in(d.path(), &["eval", "--scores", "p.scores", "--trials", "p.trials.txt", "--det-out", "det.csv"]);
    assert!(stdout.contains("eer_pct  0.00000000"), "{stdout}");
    assert!(stdout.contains("min_dcf  0.00000000"), "{stdout}");
    let det = std::fs::read_to_string(d.path().join("det.csv")).unwrap();
    assert!(det.starts_with("p_fa,p_miss,threshold\n"), "{det}");
}

#[test]
fn eval_rejects_unlabeled_and_misaligned_with_exit_3() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("u.trials.txt"), "1 e0 t0\n- e1 t1\n").unwrap();
    std::fs::write(d.path().join("u.scores"), "e0 t0 1.0\ne1 t1 0.5\n").unwrap();
    let (_, stderr, code) = run_in(d.path(), &["eval", "--scores", "u.scores", "--trials", "u.trials.txt"]);
    assert_eq!(code, 3, "{stderr}");
    assert!(stderr.contains("unlabeled"), "{stderr}");

    std::fs::write(d.path().join("m.trials.txt"), "1 e0 t0\n0 e1 n1\n").unwrap();
    std::fs::write(d.path().join("m.scores"), "e0 t0 1.0\ne9 n1 0.5\n").unwrap();
    let (_, stderr, code) = run_in(d.path(), &["eval", "--scores", "m.scores", "--trials", "m.trials.txt"]);
    assert_eq!(code, 3, "{stderr}");
    assert!(stderr.contains("row 2"), "{stderr}");
}

#[test]
fn compare_emits_one_row_per_method_and_cohort_size() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    let stdout = ok_in(d.path(), &["compare", "--embeddings", "synth.cnrm", "--manifest", "synth.split.txt", "--trials", "synth.trials.txt", "--methods", "none,snorm,asnorm1", "--k-sweep", "4,8", "--out", "cmp.csv"]);
    let rows: Vec<&str> = stdout
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("method"))
        .collect();
    assert_eq!(rows.len(), 4, "{stdout}");
    let count = |m: &str| rows.iter().filter(|r| r.starts_with(m)).count();
    assert_eq!(count("none"), 1);
    assert_eq!(count("snorm"), 1);
    assert_eq!(count("asnorm1"), 2);
    assert!(rows.iter().any(|r| r.starts_with("snorm") && r.split_whitespace().nth(1) == Some("-")));

    let csv = std::fs::read_to_string(d.path().join("cmp.csv")).unwrap();
    assert!(csv.starts_with("method,k,eer_pct,min_dcf,cllr\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn config_file_supplies_values_and_flags_override() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    init_bank(d.path(), "2", "bank.cnbk");
    std::fs::write(
        d.path().join("run.cfg"),
        "embeddings=synth.cnrm\nbank=bank.cnbk\nout=c1.cnck\nepochs=0\nk=8\nspb=12\n",
    )
    .unwrap();
    ok_in(d.path(), &["train", "--config", "run.cfg"]);
    let c1 = load_checkpoint(&d.path().join("c1.cnck")).unwrap();
    assert_eq!(c1.epoch, 0);

    // The flag beats the file.
    ok_in(d.path(), &["train", "--config", "run.cfg", "--out", "c2.cnck", "--epochs", "1"]);
    let c2 = load_checkpoint(&d.path().join("c2.cnck")).unwrap();
    assert_eq!(c2.epoch, 1);

    // An unknown key is flagged once the command itself succeeds.
    std::fs::write(d.path().join("v.trials.txt"), "1 e0 t0\n0 e0 n0\n").unwrap();
    std::fs::write(d.path().join("v.scores"), "e0 t0 1.0\ne0 n0 -1.0\n").unwrap();
    std::fs::write(d.path().join("bad.cfg"), "epochz=3\n").unwrap();
    let (_, stderr, code) = run_in(d.path(), &["eval", "--config", "bad.cfg", "--scores", "v.scores", "--trials", "v.trials.txt"]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("epochz"), "{stderr}");
}

#[test]
fn score_reports_unknown_utterances_with_exit_3() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    std::fs::write(d.path().join("ghost.trials.txt"), "1 nope_u00 spk0024_u01\n0 nope_u00 spk0025_u00\n").unwrap();
    let (_, stderr, code) = run_in(d.path(), &["score", "--method", "none", "--embeddings", "synth.cnrm", "--trials", "ghost.trials.txt", "--out", "g.scores"]);
    assert_eq!(code, 3, "{stderr}");
    assert!(stderr.contains("nope_u00"), "{stderr}");
}

#[test]
fn lwb_tas_on_a_plain_bank_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    init_bank(d.path(), "2", "bank.cnbk");
    let (_, stderr, code) = run_in(d.path(), &["score", "--method", "lwb_tas", "--cohort", "bank.cnbk", "--embeddings", "synth.cnrm", "--trials", "synth.trials.txt", "--k", "8", "--out", "x.scores"]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("checkpoint"), "{stderr}");

    // And a conflicting --select against a trained checkpoint is, too.
    ok_in(d.path(), &["train", "--embeddings", "synth.cnrm", "--bank", "bank.cnbk", "--out", "s.cnck", "--epochs", "1", "--k", "8", "--spb", "12"]);
    let (_, stderr, code) = run_in(d.path(), &["score", "--method", "lie_tas", "--cohort", "s.cnck", "--embeddings", "synth.cnrm", "--trials", "synth.trials.txt", "--select", "max", "--out", "x.scores"]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("pooling"), "{stderr}");
}

#[test]
fn thread_cap_env_is_honored_and_validated() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    let (_, stderr, code) = run_with_env(
        d.path(),
        &["score", "--method", "none", "--embeddings", "synth.cnrm", "--trials", "synth.trials.txt", "--out", "one.scores"],
        &[("COHORT_NORM_THREADS", "1")],
    );
    assert_eq!(code, 0, "{stderr}");
    let (_, stderr, code) = run_with_env(
        d.path(),
        &["score", "--method", "none", "--embeddings", "synth.cnrm", "--trials", "synth.trials.txt", "--out", "x.scores"],
        &[("COHORT_NORM_THREADS", "0")],
    );
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("COHORT_NORM_THREADS"), "{stderr}");
}

#[test]
fn score_defaults_k_and_select_from_the_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    gen_tiny(d.path());
    init_bank(d.path(), "2", "bank.cnbk");
    ok_in(d.path(), &["train", "--embeddings", "synth.cnrm", "--bank", "bank.cnbk", "--out", "k9.cnck", "--epochs", "1", "--k", "9", "--spb", "12"]);
    ok_in(d.path(), &["score", "--method", "lie_tas", "--cohort", "k9.cnck", "--embeddings", "synth.cnrm", "--trials", "synth.trials.txt", "--out", "implied.scores"]);
    ok_in(d.path(), &["score", "--method", "lie_tas", "--cohort", "k9.cnck", "--embeddings", "synth.cnrm", "--trials", "synth.trials.txt", "--k", "9", "--out", "explicit.scores"]);
    assert_eq!(read(d.path(), "implied.scores"), read(d.path(), "explicit.scores"));

    let p: PathBuf = d.path().join("k9.cnck");
    assert_eq!(load_checkpoint(&p).unwrap().cfg.cohort_size, 9);
}
