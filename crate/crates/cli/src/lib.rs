//! Command-line front end. `dispatch` is the whole program minus process exit.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use dass::config::SearchConfig;
use dass::data::{load_for_config, DataSplit, Dataset};
use dass::genotype::{instantiate, Genotype};
use dass::metrics::{feature_map_similarity, MetricsReport};
use dass::rng::RunRng;
use dass::search::{
    evaluate, probe_batch, run_paired, run_pipeline, Method, Phase, RunOptions, RunState,
};
use dass::sparse::ForwardMode;
use dass::{DassError, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "dass", version, about = "Sparse-aware differentiable architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in profile: desk or full.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ratio: Option<f64>,
    /// Overrides the config and the DASS_DATA_DIR environment variable.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the three-step search.
    Search {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/search")]
        out: PathBuf,
        /// Continue from a phase checkpoint of this config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run dense search followed by post-hoc pruning.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/baseline")]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Finish a run from its pruning checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/finetune")]
        out: PathBuf,
    },
    /// Write the genotype of a checkpoint's architecture tables.
    Derive {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "genotype.json")]
        out: PathBuf,
    },
    /// Accuracy of a genotype with weights from a checkpoint.
    Eval {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
    },
    /// Per-cell Kendall tau between the feature maps of two checkpoints.
    CompareFeatures {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired search and baseline runs over pruning ratios.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.9,0.95,0.99")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Summarize a run directory's report.json.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn resolve_config(args: &ConfigArgs) -> Result<SearchConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(p), _) => SearchConfig::load(p)?,
        (None, Some(name)) => SearchConfig::preset(name)?,
        (None, None) => SearchConfig::desk(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.ratio {
        cfg.pruning_ratio = r;
    }
    if let Some(d) = &args.data_dir {
        cfg.data_dir = Some(d.clone());
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn run_method(method: Method, cfg_args: &ConfigArgs, out: &Path, resume: Option<&Path>, log: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(cfg_args)?;
    let data = load_for_config(&cfg)?;
    let mut state = match resume {
        Some(p) => {
            let s = RunState::load(p, Some(&cfg))?;
            if s.method != method {
                return Err(DassError::Invalid(format!(
                    "checkpoint belongs to a {} run",
                    s.method.name()
                )));
            }
            s
        }
        None => RunState::new(&cfg, method)?,
    };
    run_pipeline(&mut state, &data, RunOptions { out_dir: Some(out.to_path_buf()), ..Default::default() })?;
    summarize(state.report.as_ref(), out, log)
}

fn summarize(report: Option<&MetricsReport>, out: &Path, log: &mut dyn Write) -> Result<()> {
    if let Some(r) = report {
        let _ = writeln!(
            log,
            "{}: top1 {:.2}% nonzero {} compression {:.2}x nid {:.3} gap {:.2} -> {}",
            r.method,
            r.top1_accuracy,
            r.params_nonzero,
            r.compression_rate,
            r.nid,
            r.generalization_gap,
            out.display()
        );
    }
    Ok(())
}

fn split_of<'a>(data: &'a DataSplit, name: &str) -> &'a Dataset {
    match name {
        "train" => &data.train,
        "val" => &data.val,
        _ => &data.test,
    }
}

/// Forward mode that matches what a checkpoint's network was trained in.
fn analysis_mode(state: &RunState) -> ForwardMode {
    if state.phase <= Phase::Pretrained {
        ForwardMode::Dense
    } else {
        ForwardMode::Masked
    }
}

fn write_csv(out: Option<&Path>, header: &[&str], rows: &[Vec<String>], log: &mut dyn Write) -> Result<()> {
    let mut buf = csv::Writer::from_writer(Vec::new());
    buf.write_record(header)?;
    for r in rows {
        buf.write_record(r)?;
    }
    let bytes = buf.into_inner().map_err(|e| DassError::Invalid(e.to_string()))?;
    match out {
        Some(p) => std::fs::write(p, bytes).map_err(|e| DassError::Io {
            path: p.display().to_string(),
            source: e,
        }),
        None => log.write_all(&bytes).map_err(|e| DassError::Io {
            path: "stdout".into(),
            source: e,
        }),
    }
}

fn run_command(cmd: Command, log: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Search { cfg, out, resume } => run_method(Method::Dass, &cfg, &out, resume.as_deref(), log),
        Command::Baseline { cfg, out, resume } => run_method(Method::DartsSparse, &cfg, &out, resume.as_deref(), log),
        Command::Finetune { checkpoint, out } => {
            let mut state = RunState::load(&checkpoint, None)?;
            if state.phase != Phase::Pruned {
                return Err(DassError::Invalid(format!(
                    "fine-tuning needs a pruning checkpoint, this one is at phase {:?}",
                    state.phase
                )));
            }
            let data = load_for_config(&state.config)?;
            run_pipeline(&mut state, &data, RunOptions { out_dir: Some(out.clone()), ..Default::default() })?;
            summarize(state.report.as_ref(), &out, log)
        }
        Command::Derive { checkpoint, out } => {
            let state = RunState::load(&checkpoint, None)?;
            let net = &state.supernet;
            let g = dass::genotype::derive(net.alpha_normal(), net.alpha_reduce(), &net.op_set)?;
            std::fs::write(&out, g.to_json()?).map_err(|e| DassError::Io {
                path: out.display().to_string(),
                source: e,
            })?;
            let _ = writeln!(log, "genotype written to {}", out.display());
            Ok(())
        }
        Command::Eval { genotype, checkpoint, split } => {
            let text = std::fs::read_to_string(&genotype)
                .map_err(|e| DassError::config(genotype.display().to_string(), e.to_string()))?;
            let g = Genotype::from_json(&text)?;
            let state = RunState::load(&checkpoint, None)?;
            let data = load_for_config(&state.config)?;
            let mode = analysis_mode(&state);
            let mut net = match &state.derived {
                Some(d) if d.genotype == g => d.clone(),
                _ => instantiate(&g, &state.config.net(), Some(&state.supernet.store), &mut RunRng::new(0))?,
            };
            let (acc, loss) = evaluate(&mut net, mode, split_of(&data, &split), state.config.batch_size)?;
            let _ = writeln!(
                log,
                "{}",
                serde_json::json!({ "split": split, "accuracy": acc, "loss": loss })
            );
            Ok(())
        }
        Command::CompareFeatures { a, b, out } => {
            let mut sa = RunState::load(&a, None)?;
            let mut sb = RunState::load(&b, None)?;
            let data = load_for_config(&sa.config)?;
            let probe = probe_batch(&data);
            let (ma, mb) = (analysis_mode(&sa), analysis_mode(&sb));
            let taus = feature_map_similarity(sa.final_network(), ma, sb.final_network(), mb, &probe)?;
            let rows: Vec<Vec<String>> = taus
                .iter()
                .enumerate()
                .map(|(i, t)| vec![i.to_string(), format!("{t:.4}")])
                .collect();
            write_csv(out.as_deref(), &["cell", "tau"], &rows, log)
        }
        Command::Sweep { cfg, ratios, seeds, out } => {
            let base = resolve_config(&cfg)?;
            for &r in &ratios {
                if !(0.0..=1.0).contains(&r) {
                    return Err(DassError::config("ratios", format!("{r} is outside [0, 1]")));
                }
            }
            let seeds = seeds.unwrap_or_else(|| vec![base.seed]);
            let data = load_for_config(&base)?;
            let mut per_ratio = vec![(0.0, 0.0, 0.0); ratios.len()];
            let mut feature_rows = Vec::new();
            for &seed in &seeds {
                let mut c = base.clone();
                c.seed = seed;
                let dir = out.join(format!("seed_{seed}"));
                for (i, run) in run_paired(&c, &data, &ratios, Some(&dir))?.into_iter().enumerate() {
                    let (d, b) = (run.dass.report.as_ref(), run.baseline.report.as_ref());
                    let (d, b) = d.zip(b).ok_or_else(|| DassError::Invariant("finished run without report".into()))?;
                    per_ratio[i].0 += d.top1_accuracy;
                    per_ratio[i].1 += b.top1_accuracy;
                    per_ratio[i].2 += d.params_nonzero as f64;
                    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
                    feature_rows.push(vec![
                        run.ratio.to_string(),
                        seed.to_string(),
                        format!("{:.4}", m(&run.tau_dass)),
                        format!("{:.4}", m(&run.tau_baseline)),
                    ]);
                }
            }
            let n = seeds.len() as f64;
            let rows: Vec<Vec<String>> = ratios
                .iter()
                .zip(&per_ratio)
                .map(|(r, (d, b, nz))| {
                    vec![
                        r.to_string(),
                        format!("{:.4}", d / n),
                        format!("{:.4}", b / n),
                        format!("{:.0}", nz / n),
                    ]
                })
                .collect();
            std::fs::create_dir_all(&out).map_err(|e| DassError::Io {
                path: out.display().to_string(),
                source: e,
            })?;
            write_csv(
                Some(&out.join("sweep.csv")),
                &["ratio", "accuracy_dass", "accuracy_baseline", "nonzero_params"],
                &rows,
                log,
            )?;
            write_csv(
                Some(&out.join("features.csv")),
                &["ratio", "seed", "tau_dass", "tau_baseline"],
                &feature_rows,
                log,
            )?;
            let _ = writeln!(log, "sweep written to {}", out.join("sweep.csv").display());
            Ok(())
        }
        Command::Report { run } => {
            let path = run.join("report.json");
            let text = std::fs::read_to_string(&path)
                .map_err(|e| DassError::config(path.display().to_string(), e.to_string()))?;
            let r: MetricsReport = serde_json::from_str(&text)?;
            let _ = writeln!(log, "method              {}", r.method);
            let _ = writeln!(log, "pruning ratio       {}", r.pruning_ratio);
            let _ = writeln!(log, "top-1 accuracy      {:.2}%", r.top1_accuracy);
            let _ = writeln!(log, "train accuracy      {:.2}%", r.train_accuracy);
            let _ = writeln!(log, "generalization gap  {:.2}", r.generalization_gap);
            let _ = writeln!(log, "params (total)      {}", r.params_total);
            let _ = writeln!(log, "params (nonzero)    {}", r.params_nonzero);
            let _ = writeln!(log, "compression         {:.2}x vs {}", r.compression_rate, r.baseline_params);
            let _ = writeln!(log, "NID                 {:.3}", r.nid);
            Ok(())
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
/// Normal output goes to `out`, diagnostics to `err`.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    EXIT_CONFIG
                }
            };
        }
    };
    match run_command(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_config_error() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(preset: Option<&str>) -> ConfigArgs {
        ConfigArgs {
            config: None,
            preset: preset.map(String::from),
            seed: None,
            ratio: None,
            data_dir: None,
        }
    }

    #[test]
    fn flags_override_the_preset() {
        let mut a = args(Some("desk"));
        a.seed = Some(11);
        a.ratio = Some(0.5);
        let cfg = resolve_config(&a).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.pruning_ratio, 0.5);
        assert_eq!(cfg.n_cells, SearchConfig::desk().n_cells);
    }

    #[test]
    fn no_config_means_desk() {
        assert_eq!(resolve_config(&args(None)).unwrap(), SearchConfig::desk());
        assert!(resolve_config(&args(Some("huge"))).unwrap_err().is_config_error());
    }

    #[test]
    fn help_exits_zero_on_stdout() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(dispatch(["dass", "--help"], &mut out, &mut err), EXIT_OK);
        let text = String::from_utf8(out).unwrap();
        for sub in ["search", "baseline", "finetune", "derive", "eval", "compare-features", "sweep", "report"] {
            assert!(text.contains(sub), "{sub}");
        }
        assert!(err.is_empty());
    }

    #[test]
    fn missing_subcommand_is_a_usage_error() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(dispatch(["dass"], &mut out, &mut err), EXIT_CONFIG);
        assert!(!err.is_empty());
    }
}
