use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shdp_core::eval::{der, hamming_matched, SegmentList};
use shdp_core::pipeline::ingest::{read_labels, segments_text, write_labels};
use shdp_core::pipeline::{
    decode_run, preset_config, report_run, run_experiment, write_observations, RunConfig,
    SamplerKind,
};
use shdp_core::synth::preset;
use shdp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "shdp", version, about = "Sticky HDP-HMM inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a named scenario and write features, labels and a run config.
    Synth {
        preset: String,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sequence length in frames.
        #[arg(long)]
        length: Option<usize>,
        /// Keep only the first K states.
        #[arg(long)]
        states: Option<usize>,
        /// Write real-valued features in the binary layout.
        #[arg(long)]
        binary: bool,
    },
    /// Run the chains described by a config file.
    Fit {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-decode a run from the label snapshots in its traces.
    Decode {
        run_dir: PathBuf,
        /// Write per-block labels here in addition to the segments on stdout.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Compare two per-frame label files.
    Eval { truth: PathBuf, estimate: PathBuf },
    /// Quantile tables, histograms and a summary for a run directory.
    Report { run_dir: PathBuf },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long, value_parser = ["direct", "blocked", "blocked-dp"])]
    sampler: Option<String>,
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long = "Lprime")]
    l_prime: Option<usize>,
    #[arg(long)]
    frames_per_state: Option<usize>,
    #[arg(long)]
    block_width: Option<usize>,
    /// Run directory; defaults to the config's `output`.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl Overrides {
    fn apply(self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.chains {
            cfg.chains = v;
        }
        if let Some(v) = self.sweeps {
            cfg.sweeps = v;
        }
        if let Some(v) = self.sampler {
            cfg.sampler = v.parse::<SamplerKind>()?;
        }
        if let Some(v) = self.l {
            cfg.l = v;
        }
        if let Some(v) = self.l_prime {
            cfg.l_prime = v;
        }
        if let Some(v) = self.frames_per_state {
            cfg.preprocess.frames_per_state = v;
        }
        if let Some(v) = self.block_width {
            cfg.preprocess.block_width = v;
        }
        if let Some(v) = self.output {
            cfg.output = v;
        }
        Ok(())
    }
}

fn synth(
    name: &str,
    out: PathBuf,
    seed: u64,
    length: Option<usize>,
    states: Option<usize>,
    binary: bool,
) -> Result<()> {
    let mut spec = preset(name)?.with_seed(seed);
    if let Some(k) = states {
        spec = spec.restrict(k)?;
    }
    if let Some(t) = length {
        spec = spec.with_length(t);
    }
    let sim = spec.generate()?;
    std::fs::create_dir_all(&out)?;
    let features = match (sim.obs.vocab(), binary) {
        (Some(_), _) => "features.sym",
        (None, true) => "features.bin",
        (None, false) => "features.txt",
    };
    write_observations(&out.join(features), &sim.obs, binary)?;
    write_labels(&out.join("labels.txt"), &sim.z)?;
    std::fs::write(
        out.join("scenario.json"),
        serde_json::to_string_pretty(&spec)?,
    )?;
    let mut cfg = preset_config(name, features, "run")?;
    cfg.seed = seed;
    cfg.data.truth = Some("labels.txt".into());
    std::fs::write(out.join("run.toml"), cfg.to_toml()?)?;
    println!("wrote {} frames to {}", sim.z.len(), out.display());
    Ok(())
}

fn eval(truth: PathBuf, estimate: PathBuf) -> Result<()> {
    let t = read_labels(&truth)?;
    let e = read_labels(&estimate)?;
    if t.len() != e.len() {
        return Err(Error::InvalidInput(format!(
            "{} reference labels, {} estimated",
            t.len(),
            e.len()
        )));
    }
    let report = serde_json::json!({
        "frames": t.len(),
        "hamming": hamming_matched(&t, &e)?,
        "der": der(&SegmentList::from_labels(&t), &SegmentList::from_labels(&e))?,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            preset,
            out,
            seed,
            length,
            states,
            binary,
        } => synth(&preset, out, seed, length, states, binary),
        Command::Fit { config, overrides } => {
            let mut cfg = RunConfig::load(&config)?;
            overrides.apply(&mut cfg)?;
            let summary = run_experiment(&cfg)?;
            let failed = summary.chains.iter().filter(|c| c.error.is_some()).count();
            if failed > 0 {
                eprintln!(
                    "{failed} of {} chains failed; see {}",
                    summary.chains.len(),
                    summary.dir.display()
                );
            }
            println!("{}", serde_json::to_string_pretty(&summary.metrics)?);
            Ok(())
        }
        Command::Decode { run_dir, labels } => {
            let (chain, z) = decode_run(&run_dir)?;
            if let Some(p) = labels {
                write_labels(&p, &z)?;
            }
            eprintln!("decoded chain {chain}");
            print!("{}", segments_text(&z));
            Ok(())
        }
        Command::Eval { truth, estimate } => eval(truth, estimate),
        Command::Report { run_dir } => {
            for p in report_run(&run_dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
