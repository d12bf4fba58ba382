//! Command-line pipeline: synthetic data, denoiser fitting, similarity
//! targets, joint training, and robustness evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod configs;

use std::path::PathBuf;

use commands::Overrides;

const USAGE: &str = "\
usage: simreg <subcommand> --config PATH [--seed N] [--out PATH]

subcommands:
  synth-data        generate multi-trial response scans with ground truth
  synth-task        generate the oriented-grating classification dataset
  fit-denoiser      fit the response-predicting encoder per scan
  build-similarity  build the (model or data) similarity target matrix
  train             joint classification + similarity training
  eval-noise        accuracy under Gaussian input noise
  eval-adversarial  minimal L-inf / L2 adversarial perturbations
  report            aggregate run outputs into CSV tables and a summary

flags:
  --config PATH     JSON configuration for the subcommand (required)
  --seed N          override the config seed
  --out PATH        override the config output path
";

struct ParsedArgs {
    config: PathBuf,
    overrides: Overrides,
}

fn parse_flags(args: &[String]) -> Result<ParsedArgs, String> {
    let mut config: Option<PathBuf> = None;
    let mut seed: Option<u64> = None;
    let mut out: Option<String> = None;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => {
                let v = it.next().ok_or("--config requires a path")?;
                config = Some(PathBuf::from(v));
            }
            "--seed" => {
                let v = it.next().ok_or("--seed requires a value")?;
                seed = Some(v.parse().map_err(|_| format!("invalid seed `{v}`"))?);
            }
            "--out" => {
                let v = it.next().ok_or("--out requires a path")?;
                out = Some(v.clone());
            }
            other => return Err(format!("unknown flag `{other}`")),
        }
    }
    let config = config.ok_or("missing required --config PATH")?;
    Ok(ParsedArgs { config, overrides: Overrides { seed, out } })
}

/// Dispatches one invocation; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let Some((sub, rest)) = args.split_first() else {
        eprint!("{USAGE}");
        return 1;
    };
    if sub == "--help" || sub == "-h" || sub == "help" {
        eprint!("{USAGE}");
        return 0;
    }

    let handler = match sub.as_str() {
        "synth-data" => commands::synth_data as fn(&std::path::Path, &Overrides) -> _,
        "synth-task" => commands::synth_task,
        "fit-denoiser" => commands::fit_denoiser_cmd,
        "build-similarity" => commands::build_similarity,
        "train" => commands::train,
        "eval-noise" => commands::eval_noise,
        "eval-adversarial" => commands::eval_adversarial,
        "report" => commands::report,
        other => {
            eprintln!("unknown subcommand `{other}`\n");
            eprint!("{USAGE}");
            return 1;
        }
    };

    let parsed = match parse_flags(rest) {
        Ok(p) => p,
        Err(msg) => {
            eprintln!("{msg}\n");
            eprint!("{USAGE}");
            return 1;
        }
    };

    match handler(&parsed.config, &parsed.overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
