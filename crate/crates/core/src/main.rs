use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use pmcast::align::samples::{split_by_years, Split, SplitConfig, YearRange};
use pmcast::align::{align_dataset, AlignOptions, Channel, Levels, Preset, VariableCatalog};
use pmcast::config::read_config;
use pmcast::dataset::{write_rasters, ChannelStack, Dataset};
use pmcast::error::{Error, Result};
use pmcast::eval::{error_map, evaluate, region_sweep, run_seeds, EvalOptions, ExternalForecaster, Forecaster, ModelForecaster, Persistence};
use pmcast::grid::{BoundingBox, RegridMethod};
use pmcast::histo::{FrequencyTable, FrequencyTables, DEFAULT_BETA};
use pmcast::model::checkpoint::{read_checkpoint, CheckpointHeader};
use pmcast::synth::{generate, SynthConfig};
use pmcast::time::Timestamp;
use pmcast::train::{train_loop, write_history_csv, CheckpointSink, TrainConfig, TrainData};
use pmcast::transform::{AqTransform, NormStats};

const NORM_FILE: &str = "norm_stats.json";
const TABLES_FILE: &str = "freq_tables.json";
const CKPT_FILE: &str = "best.ckpt";

#[derive(Parser)]
#[command(name = "pmcast", version, about = "Multi-variable air-pollution forecasting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded synthetic dataset.
    GenSynth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "2016-2017")]
        years: String,
        #[arg(long, default_value_t = 14)]
        days: u32,
        #[arg(long, default_value_t = 5.625)]
        resolution: f64,
        /// Comma-separated short names; all catalog variables when omitted.
        #[arg(long, value_delimiter = ',')]
        variables: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regrid to a global grid, interpolate to hourly and check the catalog.
    Align {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5.625)]
        resolution: f64,
        #[arg(long)]
        hourly: bool,
        #[arg(long, default_value = "conservative")]
        method: String,
    },
    /// Fit normalization statistics and frequency tables on one split.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        aq_transform: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the best checkpoint, history and statistics.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint, persistence or an external forecast.
    Eval {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        external: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',')]
        leads: Option<Vec<u32>>,
        /// Evaluation years; the checkpoint's test years by default.
        #[arg(long)]
        years: Option<String>,
        /// Only issue forecasts at 00 UTC.
        #[arg(long)]
        midnight: bool,
        /// Channels to report; all when omitted.
        #[arg(long, value_delimiter = ',')]
        report: Option<Vec<String>>,
        /// Score each regional preset on the uncropped data.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast minus truth rasters for one valid time.
    Errormap {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Valid time, ISO-8601 UTC.
        #[arg(long)]
        date: String,
        #[arg(long, default_value_t = 24)]
        lead: u32,
        #[arg(long = "var", value_delimiter = ',', default_value = "pm2p5")]
        vars: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram of one channel as CSV.
    Hist {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "var", default_value = "pm2p5")]
        var: String,
        /// Caps displayed counts.
        #[arg(long)]
        clip: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
        #[arg(long)]
        years: Option<String>,
        #[arg(long)]
        region: Option<String>,
        /// Standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several seeds and report mean and standard deviation.
    Seeds {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 24)]
        lead: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "channels")]
    preset: Option<String>,
    /// Comma-separated channel names such as `t2m,z_500,pm2p5`.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<String>>,
    /// Preset name or `lat_min,lat_max,lon_min,lon_max`.
    #[arg(long)]
    region: Option<String>,
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long, conflicts_with = "persistence")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    persistence: bool,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenSynth { seed, years, days, resolution, variables, out } => {
            let cfg = SynthConfig {
                seed,
                years: YearRange::parse(&years)?,
                days_per_year: days,
                resolution_deg: resolution,
                variables,
                ..SynthConfig::default()
            };
            let ds = generate(&cfg)?;
            ds.write(&out)?;
            eprintln!("wrote {} variables to {}", ds.variables.len(), out.display());
            Ok(())
        }
        Cmd::Align { input, out, resolution, hourly, method } => {
            let ds = Dataset::read(&input, None)?;
            let opts = AlignOptions {
                resolution_deg: resolution,
                method: method.parse::<RegridMethod>()?,
                hourly,
                ..AlignOptions::default()
            };
            let (aligned, report) = align_dataset(&ds, &VariableCatalog::builtin(), &opts)?;
            for (what, list) in [
                ("unknown variables", &report.unknown_variables),
                ("missing variables", &report.missing_variables),
                ("unit mismatches", &report.unit_mismatches),
            ] {
                if !list.is_empty() {
                    eprintln!("warning: {what}: {}", list.join(", "));
                }
            }
            aligned.write(&out)
        }
        Cmd::Stats { data, split, config, beta, aq_transform, out } => {
            let cfg = load_config(config.as_deref())?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => return Err(Error::Usage(format!("unknown split `{other}`"))),
            };
            let (stack, _) = load_stack(&data)?;
            let idx = split_by_years(&stack.timestamps, &cfg.splits).get(split).to_vec();
            let aq: AqTransform = match aq_transform {
                Some(s) => s.parse()?,
                None => cfg.aq_transform,
            };
            make_dir(&out)?;
            NormStats::fit(&stack, &idx, aq)?.write_json(&out.join(NORM_FILE))?;
            FrequencyTables::fit(&stack, &idx, beta.unwrap_or(cfg.beta))?.write_json(&out.join(TABLES_FILE))
        }
        Cmd::Train { data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let (stack, preset) = load_stack(&data)?;
            let train_data = TrainData::fit(stack, cfg.splits, cfg.aq_transform, cfg.beta)?;
            make_dir(&out)?;
            train_data.norm.write_json(&out.join(NORM_FILE))?;
            train_data.tables.write_json(&out.join(TABLES_FILE))?;
            let (h, w) = train_data.stack.grid.shape();
            let mut header = CheckpointHeader::new(
                cfg.model_config(train_data.n_weather, train_data.n_aq(), h, w),
                train_data.stack.channel_names(),
            );
            header.preset = preset;
            header.region = data.region.clone();
            header.norm_stats = Some(NORM_FILE.into());
            header.freq_tables = Some(TABLES_FILE.into());
            header.train = serde_json::to_value(&cfg).map_err(|e| Error::Data(e.to_string()))?;
            let sink = CheckpointSink { path: out.join(CKPT_FILE), header };
            let outcome = train_loop(&train_data, &cfg, Some(&sink))?;
            write_history_csv(&out.join("history.csv"), &outcome.history)?;
            eprintln!(
                "best epoch {} val loss {:.6} after {} steps",
                outcome.best_epoch, outcome.best_val_loss, outcome.steps
            );
            Ok(())
        }
        Cmd::Eval { source, external, data, leads, years, midnight, report, sweep, out } => {
            let mut data = data;
            let (forecaster, default_years, default_leads) = match (&source.ckpt, source.persistence, &external) {
                (Some(path), false, None) => {
                    let (f, header) = load_model(path, &mut data)?;
                    (Box::new(f) as Box<dyn Forecaster>, test_years(&header), vec![6, 12, 24, 48])
                }
                (None, true, None) => (Box::new(Persistence) as Box<dyn Forecaster>, SplitConfig::default().test, vec![6, 12, 24, 48]),
                (None, false, Some(dir)) => {
                    let f = load_external(dir, &data)?;
                    let lead = f.lead_time_hours;
                    (Box::new(f) as Box<dyn Forecaster>, SplitConfig::default().test, vec![lead])
                }
                _ => return Err(Error::Usage("choose exactly one of --ckpt, --persistence, --external".into())),
            };
            let opts = EvalOptions {
                leads: leads.unwrap_or(default_leads),
                years: years.as_deref().map(YearRange::parse).transpose()?.unwrap_or(default_years),
                midnight_only: midnight,
                channels: report,
            };
            make_dir(&out)?;
            if sweep {
                let region_arg = data.region.take();
                if region_arg.is_some() {
                    return Err(Error::Usage("--sweep evaluates every regional preset; drop --region".into()));
                }
                let (stack, _) = load_stack(&data)?;
                let regions = [
                    ("mena", BoundingBox::mena()),
                    ("east-asia", BoundingBox::east_asia()),
                    ("north-america", BoundingBox::north_america()),
                ];
                let reports = region_sweep(forecaster.as_ref(), &stack, &regions, &opts)?;
                let path = out.join("sweep.json");
                let text = serde_json::to_string_pretty(&reports).map_err(|e| Error::json(&path, e))?;
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                let csv: String = reports
                    .iter()
                    .enumerate()
                    .map(|(k, r)| {
                        let body = r.report.to_csv();
                        if k == 0 { body } else { body.lines().skip(1).map(|l| format!("{l}\n")).collect() }
                    })
                    .collect();
                let path = out.join("sweep.csv");
                return std::fs::write(&path, csv).map_err(|e| Error::io(&path, e));
            }
            let (stack, _) = load_stack(&data)?;
            let mut rep = evaluate(forecaster.as_ref(), &stack, &opts)?;
            rep.region = data.region.clone();
            rep.write_json(&out.join("report.json"))?;
            rep.write_csv(&out.join("report.csv"))?;
            for l in &rep.leads {
                for c in &l.channels {
                    println!("{:>3} h {:<10} {:.4} {}", l.lead_time_hours, c.channel, c.rmse_lat_weighted, c.units);
                }
            }
            Ok(())
        }
        Cmd::Errormap { source, data, date, lead, vars, out } => {
            let mut data = data;
            let forecaster: Box<dyn Forecaster> = match (&source.ckpt, source.persistence) {
                (Some(path), false) => Box::new(load_model(path, &mut data)?.0),
                (None, true) => Box::new(Persistence),
                _ => return Err(Error::Usage("choose one of --ckpt or --persistence".into())),
            };
            let (stack, _) = load_stack(&data)?;
            let valid = Timestamp::parse_iso(&date)?;
            let issue = valid.add_hours(-(lead as i64));
            let (i, j) = match (stack.time_index(issue), stack.time_index(valid)) {
                (Some(i), Some(j)) => (i, j),
                _ => return Err(Error::Data(format!("no data for {} with a {lead} h lead", valid.to_iso()))),
            };
            let diff = error_map(&forecaster.forecast(&stack, i, lead)?, &stack.frame(j))?;
            let catalog = VariableCatalog::builtin();
            let rasters = vars
                .iter()
                .map(|v| {
                    let c = stack
                        .channel_index(v)
                        .ok_or_else(|| Error::Usage(format!("channel `{v}` not loaded")))?;
                    Ok((raster_spec(&catalog, &stack.channels[c])?, diff.index_axis(ndarray::Axis(0), c).to_owned()))
                })
                .collect::<Result<Vec<_>>>()?;
            write_rasters(&out, &stack.grid, valid, &rasters)
        }
        Cmd::Hist { data, var, clip, beta, years, region, out } => {
            let args = DataArgs { data, preset: None, channels: Some(vec![var.clone()]), region };
            let (stack, _) = load_stack(&args)?;
            let years = years.as_deref().map(YearRange::parse).transpose()?;
            let values: Vec<f64> = (0..stack.timestamps.len())
                .filter(|&t| years.is_none_or(|y| y.contains(stack.timestamps[t])))
                .flat_map(|t| stack.plane(t, 0).iter().map(|&v| v as f64))
                .collect();
            if values.is_empty() {
                return Err(Error::EmptySelection(format!("no `{var}` values in the selected years")));
            }
            let table = FrequencyTable::build(var.clone(), &values, beta)?;
            let mut buf = Vec::new();
            table.write_csv(&mut buf, clip).map_err(|e| Error::io("<csv>", e))?;
            eprintln!("{} bins, max count {}", table.n_bins(), table.max_count());
            match out {
                Some(p) => std::fs::write(&p, buf).map_err(|e| Error::io(&p, e)),
                None => match std::io::Write::write_all(&mut std::io::stdout().lock(), &buf) {
                    Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
                    _ => Ok(()),
                },
            }
        }
        Cmd::Seeds { data, config, n, lead, out } => {
            let cfg = load_config(config.as_deref())?;
            let (stack, _) = load_stack(&data)?;
            let train_data = TrainData::fit(stack, cfg.splits, cfg.aq_transform, cfg.beta)?;
            let opts = EvalOptions {
                leads: vec![lead],
                years: cfg.splits.test,
                midnight_only: false,
                channels: None,
            };
            let report = run_seeds(&train_data, &cfg, n, &opts)?;
            make_dir(&out)?;
            let path = out.join("seeds.json");
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json(&path, e))?;
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            let csv = report.to_csv();
            print!("{csv}");
            let path = out.join("seeds.csv");
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
        }
    }
}

fn make_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), read_config)
}

fn resolve_channels(args: &DataArgs) -> Result<(Vec<Channel>, Option<String>)> {
    let catalog = VariableCatalog::builtin();
    match (&args.preset, &args.channels) {
        (Some(_), Some(_)) => Err(Error::Usage("--preset and --channels are mutually exclusive".into())),
        (_, Some(list)) => Ok((list.iter().map(|c| catalog.channel(c.trim())).collect::<Result<_>>()?, None)),
        (p, None) => {
            let preset = Preset::from_name(p.as_deref().unwrap_or("3PM"))?;
            Ok((preset.channels(&catalog)?, Some(preset.name().to_string())))
        }
    }
}

/// Loads the selected channels and crops to the region, if any.
fn load_stack(args: &DataArgs) -> Result<(ChannelStack, Option<String>)> {
    let (channels, preset) = resolve_channels(args)?;
    let names: BTreeSet<&str> = channels.iter().map(|c| c.variable.as_str()).collect();
    let names: Vec<&str> = names.into_iter().collect();
    let ds = Dataset::read(&args.data, Some(&names))?;
    let stack = ChannelStack::from_dataset(&ds, &channels)?;
    let stack = match &args.region {
        Some(r) => stack.crop(&BoundingBox::parse(r)?)?,
        None => stack,
    };
    Ok((stack, preset))
}

/// Reads a checkpoint and forces `args` to load its channels and region.
fn load_model(path: &Path, args: &mut DataArgs) -> Result<(ModelForecaster, CheckpointHeader)> {
    let (header, model) = read_checkpoint(path)?;
    if args.preset.is_some() || args.channels.is_some() {
        return Err(Error::Usage("channels come from the checkpoint; drop --preset/--channels".into()));
    }
    args.channels = Some(header.channels.clone());
    if args.region.is_none() {
        args.region = header.region.clone();
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let norm_path = dir.join(header.norm_stats.as_deref().unwrap_or(NORM_FILE));
    let norm = NormStats::read_json(&norm_path)?;
    Ok((ModelForecaster::new(model, &norm, header.channels.clone())?, header))
}

fn test_years(header: &CheckpointHeader) -> YearRange {
    serde_json::from_value::<TrainConfig>(header.train.clone())
        .map(|c| c.splits.test)
        .unwrap_or(SplitConfig::default().test)
}

fn load_external(dir: &Path, args: &DataArgs) -> Result<ExternalForecaster> {
    let (channels, _) = resolve_channels(args)?;
    let ds = Dataset::read(dir, None)?;
    let lead = ds
        .forecast
        .as_ref()
        .map(|f| f.lead_time_hours)
        .ok_or_else(|| Error::Data(format!("{} carries no forecast lead time", dir.display())))?;
    let stack = ChannelStack::from_dataset(&ds, &channels)?;
    let stack = match &args.region {
        Some(r) => stack.crop(&BoundingBox::parse(r)?)?,
        None => stack,
    };
    Ok(ExternalForecaster {
        stack,
        lead_time_hours: lead,
        label: format!("external:{}", dir.display()),
    })
}

/// Single-level spec for writing one channel's raster.
fn raster_spec(catalog: &VariableCatalog, c: &Channel) -> Result<pmcast::align::VariableSpec> {
    let mut spec = catalog
        .get(&c.variable)
        .cloned()
        .ok_or_else(|| Error::Data(format!("catalog lacks `{}`", c.variable)))?;
    spec.levels = match c.level {
        Some(l) => Levels::Pressure(vec![l]),
        None => Levels::Single,
    };
    Ok(spec)
}
