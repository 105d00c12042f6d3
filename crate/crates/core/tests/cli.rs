//! Command-line behaviour: outputs, header round trip and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use pmcast::align::catalog::VariableCatalog;
use pmcast::dataset::{Dataset, VariableData};
use pmcast::eval::EvalReport;
use pmcast::grid::LatLonGrid;
use pmcast::model::checkpoint::read_checkpoint;
use pmcast::time::Timestamp;
use pmcast::train::TrainConfig;

fn pmcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmcast")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = pmcast(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

const TINY_CFG: &str = "\
train_years = 2015
val_years = 2016
test_years = 2017
max_epochs = 2
max_steps_per_epoch = 2
batch_size = 4
anchor_stride_hours = 6
embed_dim = 8
depth = 1
num_heads = 2
lead_embed_dim = 4
";

fn synth(dir: &Path) -> String {
    let data = dir.join("data");
    ok(&["gen-synth", "--seed", "2", "--years", "2015-2017", "--days", "4", "--variables", "u10,v10,pm2p5,pm10,pm1", "--out", &s(&data)]);
    std::fs::write(dir.join("cfg.txt"), TINY_CFG).unwrap();
    s(&data)
}

#[test]
fn persistence_on_constant_data_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let grid = LatLonGrid::global(22.5).unwrap();
    let spec = VariableCatalog::builtin().get("pm2p5").unwrap().clone();
    let t0 = Timestamp::from_ymdh(2017, 1, 1, 0).unwrap();
    let n = 60;
    let ds = Dataset {
        variables: vec![VariableData {
            spec,
            cadence_hours: 1,
            timestamps: (0..n).map(|k| t0.add_hours(k)).collect(),
            data: vec![3e-8; n as usize * grid.height() * grid.width()],
        }],
        grid,
        forecast: None,
    };
    ds.write(&dir.path().join("const")).unwrap();
    let out = dir.path().join("eval");
    ok(&["eval", "--persistence", "--data", &s(&dir.path().join("const")), "--channels", "pm2p5", "--years", "2017", "--out", &s(&out)]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.leads.len(), 4);
    for l in &report.leads {
        assert_eq!(l.channels[0].rmse, 0.0);
        assert_eq!(l.channels[0].rmse_lat_weighted, 0.0);
    }
}

#[test]
fn train_then_eval_round_trips_header_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = dir.path().join("run");
    let cfg_path = s(&dir.path().join("cfg.txt"));
    ok(&["train", "--data", &data, "--preset", "3PM", "--region", "mena", "--config", &cfg_path, "--out", &s(&run)]);
    let (header, _) = read_checkpoint(&run.join("best.ckpt")).unwrap();
    let cfg: TrainConfig = pmcast::config::read_config(Path::new(&cfg_path)).unwrap();
    assert_eq!(header.config, cfg.model_config(0, 3, 8, 14));
    assert_eq!(header.channels, vec!["pm2p5", "pm10", "pm1"]);
    assert_eq!(header.preset.as_deref(), Some("3PM"));
    let stored: TrainConfig = serde_json::from_value(header.train.clone()).unwrap();
    assert_eq!(stored, cfg);

    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,lr,wall_time\n"));

    let ev = dir.path().join("eval");
    ok(&["eval", "--ckpt", &s(&run.join("best.ckpt")), "--data", &data, "--leads", "6,24", "--out", &s(&ev)]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.region.as_deref(), Some("mena"));
    assert_eq!(report.years, "2017");
    assert_eq!(report.leads.iter().map(|l| l.lead_time_hours).collect::<Vec<_>>(), vec![6, 24]);

    let em = dir.path().join("errormap");
    ok(&["errormap", "--ckpt", &s(&run.join("best.ckpt")), "--data", &data, "--date", "2017-01-03T00:00:00Z", "--var", "pm2p5,pm10", "--out", &s(&em)]);
    let maps = Dataset::read(&em, None).unwrap();
    assert_eq!(maps.variables.len(), 2);
    assert_eq!(maps.grid.shape(), (8, 14));
}

#[test]
fn seeds_report_mean_and_std() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = ok(&["seeds", "--data", &data, "--preset", "3PM", "--region", "mena", "--config", &s(&dir.path().join("cfg.txt")), "--n", "2", "--out", &s(&dir.path().join("seeds"))]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("channel,mean,std,summary"));
    for line in lines {
        let summary = line.rsplit(',').next().unwrap();
        let (m, rest) = summary.split_once(" (").unwrap();
        assert!(rest.ends_with(')'));
        assert_eq!(m.split_once('.').unwrap().1.len(), 2, "{summary}");
        assert_eq!(rest.trim_end_matches(')').split_once('.').unwrap().1.len(), 2, "{summary}");
    }
}

#[test]
fn hist_and_stats_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = ok(&["hist", "--data", &data, "--var", "pm2p5", "--clip", "200"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("bin_lo,bin_hi,count,count_clipped,weight"));
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let (count, shown): (u64, u64) = (f[2].parse().unwrap(), f[3].parse().unwrap());
        assert_eq!(shown, count.min(200));
    }
    let st = dir.path().join("stats");
    ok(&["stats", "--data", &data, "--preset", "3PM", "--config", &s(&dir.path().join("cfg.txt")), "--out", &s(&st)]);
    assert!(st.join("norm_stats.json").exists() && st.join("freq_tables.json").exists());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("nothing"));
    let out = s(&dir.path().join("out"));
    let code = |args: &[&str]| pmcast(args).status.code();
    assert_eq!(code(&["eval", "--persistence", "--bogus-flag"]), Some(2));
    assert_eq!(code(&["train", "--data", &missing, "--preset", "3PM", "--channels", "pm2p5", "--out", &out]), Some(2));
    assert_eq!(code(&["train", "--data", &missing, "--preset", "NoSuchPreset", "--out", &out]), Some(2));
    assert_eq!(code(&["eval", "--persistence", "--data", &missing, "--out", &out]), Some(3));
    std::fs::write(dir.path().join("bad.txt"), "learning_rat = 1\n").unwrap();
    assert_eq!(code(&["train", "--data", &missing, "--config", &s(&dir.path().join("bad.txt")), "--out", &out]), Some(2));
}
