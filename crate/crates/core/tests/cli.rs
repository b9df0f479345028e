use std::path::Path;
use std::process::{Command, Output};

use smes_core::checkpoint;
use smes_core::data::read_log;
use smes_core::train::{predict, train, TrainConfig};
use smes_core::{generate, ModelDims, ModelSpec, SynthSpec};

fn smes(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smes"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run smes")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn generate_writes_header_and_records() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("gen.cfg"),
        "users = 12\nrecords_per_user = 5\nfeatures = 4\npositive_rates = 0.4, 0.2\n",
    )
    .unwrap();
    ok(&smes(
        &[
            "generate", "--config", "gen.cfg", "--out", "a.tsv", "--seed", "3",
        ],
        dir.path(),
    ));
    let text = String::from_utf8(read(dir.path(), "a.tsv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "user_id\tf_0\tf_1\tf_2\tf_3\ty_0\ty_1"
    );
    assert_eq!(lines.count(), 60);
    ok(&smes(
        &[
            "generate", "--config", "gen.cfg", "--out", "b.tsv", "--seed", "3",
        ],
        dir.path(),
    ));
    assert_eq!(read(dir.path(), "a.tsv"), read(dir.path(), "b.tsv"));
}

#[test]
fn invalid_rate_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = smes(
        &[
            "generate",
            "--out",
            "x.tsv",
            "--set",
            "positive_rates=0.3,1.5",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("positive_rates"));
    let out = smes(
        &["generate", "--out", "x.tsv", "--set", "no_such_key=1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let out = smes(&["generate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_data_file_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = smes(
        &["train", "--data", "absent.tsv", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.tsv"));
}

#[test]
fn train_writes_metrics_and_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    ok(&smes(
        &[
            "generate",
            "--out",
            "log.tsv",
            "--set",
            "users=40",
            "--set",
            "records_per_user=20",
        ],
        dir.path(),
    ));
    ok(&smes(
        &[
            "train",
            "--data",
            "log.tsv",
            "--out",
            "run",
            "--seed",
            "5",
            "--set",
            "epochs=3",
            "--set",
            "experts=8",
        ],
        dir.path(),
    ));
    let metrics = String::from_utf8(read(dir.path(), "run/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,task_loss,l_lb,total_loss,mean_union,cv,max_mean_ratio,dead_fraction,\
         auc_y_0,auc_y_1,auc_y_2,gauc_y_0,gauc_y_1,gauc_y_2"
    );
    assert_eq!(lines.count(), 3);
    let model = checkpoint::load(&dir.path().join("run/model.ckpt")).unwrap();
    assert_eq!(model.dims().experts, 8);
    assert_eq!(model.seed(), 5);
    let log = read_log(&dir.path().join("log.tsv")).unwrap();
    assert_eq!(predict(&model, &log, 64).unwrap().len(), log.len());
}

#[test]
fn checkpoint_round_trip_gives_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let log = generate(&SynthSpec {
        users: 20,
        records_per_user: 10,
        ..SynthSpec::default()
    })
    .unwrap();
    let dims = ModelDims {
        features: 16,
        encoder_hidden: 8,
        d_in: 8,
        d_out: 4,
        experts: 6,
        tasks: 3,
    };
    let tc = TrainConfig {
        model: ModelSpec::progressive(dims, 1, 2).unwrap(),
        learning_rate: 0.05,
        batch_size: 20,
        epochs: 2,
        seed: 3,
        optimizer: smes_core::train::OptimizerKind::Sgd,
    };
    let model = train(&log, None, &tc).unwrap().model;
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &model).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let a = predict(&model, &log, 32).unwrap();
    let b = predict(&loaded, &log, 32).unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn dense_limit_bench_point_has_equal_expert_flops() {
    let dir = tempfile::tempdir().unwrap();
    ok(&smes(
        &[
            "bench",
            "--out",
            "b.csv",
            "--set",
            "experts_sweep=8",
            "--set",
            "shared=8",
            "--set",
            "adaptive=0",
            "--set",
            "batches=1",
        ],
        dir.path(),
    ));
    let text = String::from_utf8(read(dir.path(), "b.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let col = rdr
        .headers()
        .unwrap()
        .iter()
        .position(|h| h == "expert_flops")
        .unwrap();
    let flops: Vec<String> = rdr.records().map(|r| r.unwrap()[col].to_string()).collect();
    assert_eq!(flops.len(), 2);
    assert_eq!(flops[0], flops[1]);
    assert!(dir.path().join("b.csv.timing.csv").exists());
}

#[test]
fn empty_profile_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.samples"), "").unwrap();
    let out = smes(
        &[
            "profile-workspace",
            "--out",
            "p.csv",
            "--set",
            "profile=empty.samples",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty load profile"));
}

#[test]
fn profile_reports_quantile_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(&smes(
        &[
            "profile-workspace",
            "--out",
            "p.csv",
            "--set",
            "batches=40",
            "--set",
            "heavy_tail_fraction=0.2",
            "--workers",
            "2",
        ],
        dir.path(),
    ));
    let text = String::from_utf8(read(dir.path(), "p.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[3][0], "1");
    assert_eq!(&rows[3][6], "0", "q = 1 must not wait");
    let samples = String::from_utf8(read(dir.path(), "p.csv.samples")).unwrap();
    assert_eq!(samples.lines().count(), 40);
}
