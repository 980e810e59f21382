//! `volseg` command-line frontend.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;
use volseg::cascade::{stage1_label_map, stage1_predict_full, train_stage2, Branch, BRANCH_FACTORS};
use volseg::grid::LabelVolume;
use volseg::infer::dice_per_class;
use volseg::ledger::{compare, estimate, LedgerConfig};
use volseg::train::{predict_case, train_network, RunConfig, TrainOutcome};
use volseg::unet::{load_checkpoint, save_checkpoint, NetworkKind};
use volseg::volio::{read_cases, read_split, read_volume, write_phantom_corpus, write_volume, Case, Split};
use volseg::{Error, Result};

/// Run configuration saved next to each checkpoint.
const RUN_FILE: &str = "run.json";

#[derive(Parser)]
#[command(name = "volseg", version, about = "Memory-efficient 3D U-net segmentation on volumetric data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded phantom corpus with a train/val/test split.
    Phantom {
        #[arg(long)]
        seed: u64,
        /// Volume extent, `D,H,W` or a single edge.
        #[arg(long, value_parser = parse_dims)]
        dims: [usize; 3],
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Train one stage-1 meU-net branch.
    TrainStage1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_branch)]
        branch_k: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the post-concatenation network on two stage-1 branches.
    TrainStage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage1_a: PathBuf,
        #[arg(long)]
        stage1_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a label volume from an image volume.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, requires = "stage1_b")]
        stage1_a: Option<PathBuf>,
        #[arg(long, requires = "stage1_a")]
        stage1_b: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class Dice of a prediction against a reference, as CSV.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Modeled training memory of a configuration.
    Memreport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [e] => Ok([e; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(format!("expected one or three extents, got {}", parts.len())),
    }
}

fn parse_branch(s: &str) -> std::result::Result<f64, String> {
    let k: f64 = s.parse().map_err(|e| format!("{s:?}: {e}"))?;
    BRANCH_FACTORS
        .iter()
        .copied()
        .find(|&b| b == k)
        .ok_or_else(|| format!("branch factor must be one of {BRANCH_FACTORS:?}"))
}

/// Reads a JSON config; unreadable or malformed files are config errors.
fn read_config<C: serde::de::DeserializeOwned>(path: &Path) -> Result<C> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn data_dir(config: &RunConfig) -> Result<PathBuf> {
    config
        .data_dir
        .as_ref()
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config("run config needs data_dir".into()))
}

fn load_split(config: &RunConfig) -> Result<(PathBuf, Split, Vec<Case>, Vec<Case>)> {
    let dir = data_dir(config)?;
    let split = read_split(&dir)?;
    let train = read_cases(&dir, &split.train)?;
    let val = read_cases(&dir, &split.val)?;
    Ok((dir, split, train, val))
}

fn save_outcome(outcome: &TrainOutcome<f32>, config: &RunConfig, out: &Path) -> Result<()> {
    save_checkpoint(&outcome.network, out)?;
    let run = serde_json::to_string_pretty(config).expect("run config serializes");
    write_text(&out.join(RUN_FILE), &run)?;
    write_text(&out.join("history.csv"), &outcome.history.to_csv())
}

fn load_branch(dir: &Path) -> Result<Branch> {
    let (network, _) = load_checkpoint::<f32>(dir)?;
    let run: RunConfig = read_config(&dir.join(RUN_FILE))?;
    Ok(Branch { network, plan: run.plan })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { seed, dims, out_dir, count } => {
            fs::create_dir_all(&out_dir).map_err(|e| Error::Data(format!("{}: {e}", out_dir.display())))?;
            let split = write_phantom_corpus(&out_dir, seed, dims, count)?;
            println!(
                "wrote {count} phantoms to {} (train {}, val {}, test {})",
                out_dir.display(),
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
        }
        Command::TrainStage1 { config, branch_k, out } => {
            let mut cfg: RunConfig = read_config(&config)?;
            cfg.plan.k = branch_k;
            cfg.validate()?;
            let (_, _, train, val) = load_split(&cfg)?;
            let outcome = train_network::<f32>(NetworkKind::MeUnet, &train, &val, &cfg, None)?;
            save_outcome(&outcome, &cfg, &out)?;
            println!("best epoch {} mean foreground dice {:.6}", outcome.best_epoch, outcome.best_metric);
        }
        Command::TrainStage2 { config, stage1_a, stage1_b, out } => {
            let mut cfg: RunConfig = read_config(&config)?;
            cfg.plan.k = 1.0;
            cfg.validate()?;
            let branches = [load_branch(&stage1_a)?, load_branch(&stage1_b)?];
            let (dir, _, train, val) = load_split(&cfg)?;
            let cache = dir.join("cache");
            let all: Vec<Case> = train.iter().chain(&val).cloned().collect();
            let guidance = stage1_label_map(&branches, &all, Some(&cache))?;
            let outcome = train_stage2::<f32>(&train, &val, &guidance, &cfg)?;
            save_outcome(&outcome, &cfg, &out)?;
            println!("best epoch {} mean foreground dice {:.6}", outcome.best_epoch, outcome.best_metric);
        }
        Command::Predict { model, stage1_a, stage1_b, input, out } => {
            let (network, _) = load_checkpoint::<f32>(&model)?;
            let run: RunConfig = read_config(&model.join(RUN_FILE))?;
            let image = read_volume(&input)?;
            let case = Case {
                id: input.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
                labels: LabelVolume::filled(image.dims().to_vec(), 0),
                image,
            };
            let guidance = match (network.config().postconcat, stage1_a, stage1_b) {
                (true, Some(a), Some(b)) => Some(stage1_predict_full(&[load_branch(&a)?, load_branch(&b)?], &case, None)?.labels),
                (true, _, _) => return Err(Error::Config("a post-concatenation model needs --stage1-a and --stage1-b".into())),
                (false, None, None) => None,
                (false, _, _) => return Err(Error::Config("stage-1 branches given for a model without guidance".into())),
            };
            let fused = predict_case(&network, &case, &run.plan, guidance.as_ref())?;
            write_volume(&out, &fused.labels)?;
        }
        Command::Eval { pred, truth } => {
            let p: LabelVolume = read_volume(&pred)?;
            let t: LabelVolume = read_volume(&truth)?;
            let classes = p.data().iter().chain(t.data()).copied().max().map_or(1, |m| m as usize + 1);
            println!("class,dice");
            for (c, d) in dice_per_class(&p, &t, classes)?.iter().enumerate() {
                println!("{c},{d:.8}");
            }
        }
        Command::Memreport { config, compare: other, json } => {
            let a: LedgerConfig = read_config(&config)?;
            let report = estimate(&a)?;
            match other {
                None if json => println!("{}", report.to_json()),
                None => print!("{}", report.to_table()),
                Some(path) => {
                    let b = estimate(&read_config::<LedgerConfig>(&path)?)?;
                    let cmp = compare(&report, &b)?;
                    if json {
                        let v = serde_json::json!({
                            "ratio": cmp.ratio,
                            "a": serde_json::from_str::<Value>(&report.to_json()).expect("report json"),
                            "b": serde_json::from_str::<Value>(&b.to_json()).expect("report json"),
                        });
                        println!("{}", serde_json::to_string_pretty(&v).expect("json"));
                    } else {
                        print!("{}", cmp.to_table());
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
