//! `vtc`: batch front end for scoring, pruning, diagnostics, simulation and
//! cost estimates.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vtc_core::cost::{cost_report, ModelDims};
use vtc_core::diagnostics::{consistency_report, k_sweep, ConsistencyReport, KSweepRow};
use vtc_core::scoring::{encoder_ensemble_importance, EnsembleFn, ImportanceScore, DEFAULT_K};
use vtc_core::selection::{make_prune_plan, PruneLocation};
use vtc_core::sim::{simulate, SimConfig};
use vtc_core::trace::{read_trace_file, write_trace_file};

#[derive(Parser)]
#[command(name = "vtc", version, about = "CLS-attention visual token compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score visual tokens from an encoder trace.
    Score {
        #[arg(long)]
        trace: PathBuf,
        /// Number of encoder layers to ensemble, ending at the penultimate.
        #[arg(long, default_value_t = DEFAULT_K, value_parser = parse_positive)]
        k: usize,
        #[arg(long, default_value = "avg", value_parser = parse_ensemble)]
        ensemble: EnsembleFn,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the top-N tokens of a score file.
    Prune {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, value_parser = parse_positive)]
        keep: usize,
        #[arg(long)]
        out: PathBuf,
        /// Defer pruning until after this many decoder layers.
        #[arg(long, value_parser = parse_positive)]
        after_layer: Option<usize>,
    },
    /// Encoder/decoder consistency report.
    Diag {
        #[arg(long)]
        enc: PathBuf,
        #[arg(long)]
        dec: PathBuf,
        /// Comma-separated token budgets.
        #[arg(long, default_value = "64,128", value_parser = parse_budgets)]
        budgets: Budgets,
        #[arg(long, default_value_t = DEFAULT_K, value_parser = parse_positive)]
        k: usize,
        #[arg(long, default_value = "avg", value_parser = parse_ensemble)]
        ensemble: EnsembleFn,
        /// Inclusive ensemble-depth range, e.g. `1..5`.
        #[arg(long, value_parser = parse_k_range)]
        k_sweep: Option<KRange>,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_json: PathBuf,
    },
    /// Generate encoder and decoder traces from the toy transformer.
    Sim {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        tokens: usize,
        #[arg(long, default_value_t = 8)]
        planted: usize,
        #[arg(long, default_value_t = 4.0)]
        gamma: f64,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 6)]
        enc_layers: usize,
        #[arg(long, default_value_t = 4)]
        dec_layers: usize,
        #[arg(long, default_value_t = 8)]
        outputs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prefill FLOPs and KV-cache size before and after pruning.
    Cost {
        #[arg(long)]
        d: u64,
        #[arg(long)]
        ffn: u64,
        #[arg(long)]
        layers: u64,
        #[arg(long)]
        text: u64,
        #[arg(long)]
        full: u64,
        #[arg(long)]
        keep: u64,
        #[arg(long, default_value_t = 0)]
        after_layer: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Debug)]
struct Budgets(Vec<usize>);

#[derive(Clone, Copy, Debug)]
struct KRange(usize, usize);

fn parse_positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_ensemble(s: &str) -> Result<EnsembleFn, String> {
    s.parse().map_err(|e: vtc_core::Error| e.to_string())
}

fn parse_budgets(s: &str) -> Result<Budgets, String> {
    let values: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if values.is_empty() || values.contains(&0) {
        return Err("budgets must be positive integers".into());
    }
    Ok(Budgets(values))
}

fn parse_k_range(s: &str) -> Result<KRange, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected A..B, got {s:?}"))?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let a: usize = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if a == 0 || b < a {
        return Err(format!("invalid range {s:?}"));
    }
    Ok(KRange(a, b))
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<vtc_core::Error> for Failure {
    fn from(e: vtc_core::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn json_line<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serialisable");
    s.push('\n');
    s
}

#[derive(serde::Serialize)]
struct DiagJson<'a> {
    #[serde(flatten)]
    report: &'a ConsistencyReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    k_sweep: Option<&'a [KSweepRow]>,
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Score {
            trace,
            k,
            ensemble,
            out,
        } => {
            let trace = read_trace_file(&trace)?;
            let scores = encoder_ensemble_importance(&trace, k, ensemble)?;
            write_text(&out, &(scores.to_json() + "\n"))
        }
        Command::Prune {
            scores,
            keep,
            out,
            after_layer,
        } => {
            let text = fs::read_to_string(&scores)?;
            let scores = ImportanceScore::from_json(&text)?;
            let location = match after_layer {
                None => PruneLocation::BeforeLlm,
                Some(layer) => PruneLocation::AfterLlmLayer { layer },
            };
            let plan = make_prune_plan(&scores, keep, location)?;
            write_text(&out, &(plan.to_json() + "\n"))
        }
        Command::Diag {
            enc,
            dec,
            budgets,
            k,
            ensemble,
            k_sweep: sweep,
            out_csv,
            out_json,
        } => {
            let enc = read_trace_file(&enc)?;
            let dec = read_trace_file(&dec)?;
            let report = consistency_report(&enc, &dec, &budgets.0, k, ensemble)?;
            let rows = sweep
                .map(|KRange(a, b)| k_sweep(&enc, &dec, &budgets.0, a..=b, ensemble))
                .transpose()?;
            let mut csv = Vec::new();
            report.write_csv(&mut csv)?;
            fs::write(&out_csv, csv)?;
            let doc = DiagJson {
                report: &report,
                k_sweep: rows.as_deref(),
            };
            write_text(&out_json, &json_line(&doc))
        }
        Command::Sim {
            seed,
            tokens,
            planted,
            gamma,
            width,
            heads,
            enc_layers,
            dec_layers,
            outputs,
            out,
        } => {
            let cfg = SimConfig {
                seed,
                n_visual: tokens,
                width,
                heads,
                enc_layers,
                dec_layers,
                output_tokens: outputs,
                planted,
                gamma,
                recompact_positions: false,
            };
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let sim = simulate(&cfg)?;
            fs::create_dir_all(&out)?;
            write_trace_file(&sim.encoder_trace, out.join("enc.vtct"))?;
            write_trace_file(&sim.decoder_trace, out.join("dec.vtct"))?;
            write_text(&out.join("sim.json"), &json_line(&sim.sidecar(&cfg)))
        }
        Command::Cost {
            d,
            ffn,
            layers,
            text,
            full,
            keep,
            after_layer,
            out,
        } => {
            let dims = ModelDims {
                hidden: d,
                ffn,
                layers,
                n_text: text,
                n_vis_full: full,
                n_vis_kept: keep,
                prune_layer: after_layer,
            };
            dims.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let report = json_line(&cost_report(&dims)?);
            match out {
                Some(path) => write_text(&path, &report),
                None => {
                    print!("{report}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("vtc: usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("vtc: {msg}");
            ExitCode::from(2)
        }
    }
}
