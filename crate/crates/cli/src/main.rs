use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use flobc::experiments::{run_experiment, Experiment, ExperimentSpec};
use flobc::ledger::{read_chain_file, verify_chain_bytes, write_chain_file, Block, RoundAction, StateStore, TxKind};
use flobc::netsim::{run, SimConfig};

#[derive(Parser)]
#[command(name = "flobc", version, about = "Federated learning over a simulated BFT ledger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation from a TOML config.
    Run {
        config: PathBuf,
        /// Directory for metrics.csv and chain.bin; without it the metrics go to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scripted experiment: benchmark, ratio_sweep, scoring or sync_schemes.
    Experiment {
        name: Experiment,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Rounds per run.
        #[arg(long)]
        rounds: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the blocks of a chain file, or one block in detail.
    Inspect {
        chain: PathBuf,
        #[arg(long)]
        height: Option<u64>,
    },
    /// Replay a chain file and check every link, transaction and state hash.
    Verify { chain: PathBuf },
    /// Print the base config of an experiment as TOML.
    Template {
        #[arg(default_value = "scoring")]
        name: Experiment,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => cmd_run(&config, out.as_deref()),
        Command::Experiment { name, seeds, rounds, out } => cmd_experiment(name, seeds, rounds, out.as_deref()),
        Command::Inspect { chain, height } => cmd_inspect(&chain, height),
        Command::Verify { chain } => cmd_verify(&chain),
        Command::Template { name } => {
            print!("{}", ExperimentSpec::default_for(name).base.to_toml());
            Ok(())
        }
    }
}

fn cmd_run(config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = SimConfig::load(config).map_err(anyhow::Error::msg)?;
    let outcome = run(&cfg)?;
    outcome.metrics.check_trust(1e-9).map_err(anyhow::Error::msg).context("trust invariant violated")?;
    let check = flobc::ledger::verify_chain(&outcome.chain);
    if !check.ok {
        bail!("produced chain does not verify: {:?}", check.failure);
    }
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
            outcome.metrics.write_csv(&dir.join("metrics.csv"))?;
            write_chain_file(&dir.join("chain.bin"), &outcome.chain)?;
        }
        None => print!("{}", String::from_utf8_lossy(&outcome.metrics.to_csv())),
    }
    let last = outcome.metrics.rows.last().expect("genesis row");
    eprintln!(
        "rounds {}, model version {}, accuracy {:.4}, chain height {}, {} messages ({} dropped), ended at {}",
        last.round,
        last.version,
        last.accuracy,
        outcome.chain.len() - 1,
        outcome.stats.messages_sent,
        outcome.stats.messages_dropped,
        outcome.stats.end_time,
    );
    Ok(())
}

fn cmd_experiment(name: Experiment, seeds: Option<Vec<u64>>, rounds: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut spec = ExperimentSpec::default_for(name);
    if let Some(s) = seeds {
        spec.seeds = s;
    }
    if let Some(r) = rounds {
        spec.rounds = r;
    }
    let report = run_experiment(&spec)?;
    for r in &report.runs {
        r.metrics
            .check_trust(1e-9)
            .map_err(anyhow::Error::msg)
            .with_context(|| format!("trust invariant violated in {} seed {}", r.run_id, r.seed))?;
        if !r.chain.is_empty() {
            let check = flobc::ledger::verify_chain(&r.chain);
            if !check.ok {
                bail!("chain of {} seed {} does not verify: {:?}", r.run_id, r.seed, check.failure);
            }
        }
    }
    if let Some(dir) = out {
        report.write(dir)?;
        eprintln!("wrote {} runs to {}", report.runs.len(), dir.display());
    }
    print!("{}", String::from_utf8_lossy(&report.summary.to_csv()));
    Ok(())
}

fn describe(kind: &TxKind) -> String {
    match kind {
        TxKind::Genesis(g) => format!(
            "Genesis model v{} {} trainers {} scoring {}",
            g.model.version,
            g.model.digest.short(),
            g.trainers.len(),
            if g.scoring { "on" } else { "off" }
        ),
        TxKind::ShareGradient { round, update } => format!(
            "ShareGradient round {round} from {} on v{} ({} steps) {}",
            update.trainer_id,
            update.base_version,
            update.steps,
            update.digest().short()
        ),
        TxKind::ReleaseModel { model, applied } => {
            let parts: Vec<String> = applied.iter().map(|(t, w)| format!("{t}:{w:.4}")).collect();
            format!("ReleaseModel v{} {} weights [{}]", model.version, model.digest.short(), parts.join(" "))
        }
        TxKind::TrustAdjust { trainer, new_raw } => format!("TrustAdjust {trainer} raw {new_raw}"),
        TxKind::RoundControl { round, action } => match action {
            RoundAction::Open { at, deadline } => match deadline {
                Some(d) => format!("Open round {round} at {at} deadline {d}"),
                None => format!("Open round {round} at {at}"),
            },
            RoundAction::Extend { by } => format!("Extend round {round} by {by}"),
            RoundAction::Close => format!("Close round {round}"),
        },
    }
}

fn summary_line(b: &Block) -> String {
    let mut kinds: Vec<(&str, usize)> = Vec::new();
    for tx in &b.txs {
        match kinds.iter_mut().find(|(k, _)| *k == tx.kind.name()) {
            Some((_, n)) => *n += 1,
            None => kinds.push((tx.kind.name(), 1)),
        }
    }
    let kinds: Vec<String> = kinds.iter().map(|(k, n)| format!("{k}x{n}")).collect();
    format!("{:>5} {} by {} [{}]", b.height, b.digest().short(), b.proposer, kinds.join(", "))
}

fn print_state(state: &StateStore) {
    let rs = &state.round_state;
    println!("state hash    {}", state.state_hash());
    println!("model         v{} {}", state.current_model.version, state.current_model.digest);
    println!(
        "round         {} ({}, {} submitted)",
        rs.round_id,
        if rs.closed { "closed" } else { "open" },
        rs.submitted.len()
    );
    let phi: Vec<String> = state.trust.phi_vector().iter().map(|(t, p)| format!("{t}:{p:.4}")).collect();
    println!("trust         {}", phi.join(" "));
}

fn cmd_inspect(path: &Path, height: Option<u64>) -> Result<()> {
    let blocks = read_chain_file(path)?;
    let Some(h) = height else {
        for b in &blocks {
            println!("{}", summary_line(b));
        }
        return Ok(());
    };
    let Some(b) = blocks.get(h as usize) else {
        bail!("no block at height {h} (chain has {} blocks)", blocks.len());
    };
    println!("height        {}", b.height);
    println!("digest        {}", b.digest());
    println!("prev          {}", b.prev_hash);
    println!("proposer      {}", b.proposer);
    for (i, tx) in b.txs.iter().enumerate() {
        println!("tx {i:<3}        {} (by {}, nonce {})", describe(&tx.kind), tx.author, tx.nonce);
    }
    let mut chain = flobc::ledger::Chain::from_genesis(blocks[0].clone())?;
    for next in &blocks[1..=h as usize] {
        chain.append(next.clone()).with_context(|| format!("replaying height {}", next.height))?;
    }
    print_state(chain.state());
    Ok(())
}

fn cmd_verify(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).with_context(|| path.display().to_string())?;
    let v = verify_chain_bytes(&bytes);
    match v.failure {
        None => {
            println!("ok: {} blocks verified", v.verified);
            Ok(())
        }
        Some((at, reason)) => bail!("verification failed at height {at}: {reason}"),
    }
}
