//! Command-line front end. `main.rs` only forwards process arguments here so
//! the whole command surface can be exercised in-process by tests.

use crate::ecc::{key_material_size, Curve, KeyScheme, SecurityLevel};
use crate::handshake::{
    provision_pair, run_loopback, HandshakeConfig, LoopbackParty, Role, LOOPBACK_SERVER_ID,
};
use crate::hash::sha256;
use crate::netsim::{ScenarioConfig, Simulation};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "iotsec",
    about = "Two-phase authenticated VPN tunnels for home IoT networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum CliCommand {
    /// Run a scenario file through the network simulator.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the report here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the line-delimited event log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print comparable ECC and RSA key sizes per security level.
    KeysizeTable {
        #[arg(long, value_enum, default_value_t = TableFormat::Text)]
        format: TableFormat,
    },
    /// Run a handshake between an in-memory client and server and print each flight.
    DemoHandshake {
        #[arg(long, value_enum, default_value_t = CurveArg::T17)]
        curve: CurveArg,
        /// Also dump the bytes of every flight.
        #[arg(long)]
        verbose: bool,
    },
    Version,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CurveArg {
    #[value(name = "T17")]
    T17,
    #[value(name = "P256")]
    P256,
}

impl CurveArg {
    fn curve(self) -> Curve {
        match self {
            CurveArg::T17 => Curve::t17(),
            CurveArg::P256 => Curve::p256(),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run_command(&cli.command, out, err),
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            EXIT_OK
        }
        Err(e) => {
            let _ = write!(err, "{e}");
            EXIT_USAGE
        }
    }
}

pub fn run_command(command: &CliCommand, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match command {
        CliCommand::Run {
            scenario,
            seed,
            report,
            log,
        } => run_scenario_file(scenario, *seed, report.as_deref(), log.as_deref(), out),
        CliCommand::KeysizeTable { format } => keysize_table(*format, out),
        CliCommand::DemoHandshake { curve, verbose } => demo_handshake(curve.curve(), *verbose, out),
        CliCommand::Version => writeln!(out, "iotsec {}", env!("CARGO_PKG_VERSION"))
            .map(|_| EXIT_OK)
            .map_err(|e| e.to_string()),
    };
    match result {
        Ok(code) => code,
        Err(message) => {
            let _ = writeln!(err, "error: {message}");
            EXIT_USAGE
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn run_scenario_file(
    scenario: &Path,
    seed: u64,
    report_path: Option<&Path>,
    log_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32, String> {
    let config = ScenarioConfig::load(scenario).map_err(|e| format!("{}: {e}", scenario.display()))?;
    let mut sim = Simulation::build(config, seed).map_err(|e| e.to_string())?;
    let report = sim.run();
    let json = report.to_json();
    if let Some(path) = log_path {
        write_file(path, &sim.event_log())?;
    }
    let io = |e: std::io::Error| e.to_string();
    match report_path {
        Some(path) => {
            write_file(path, &json)?;
            let established = report
                .handshakes
                .iter()
                .filter(|h| h.outcome == crate::netsim::HandshakeOutcome::Established)
                .count();
            writeln!(
                out,
                "{}: seed {seed}, {} epochs, {established}/{} handshakes established, {}/{} packets delivered, {}",
                report.scenario,
                report.epochs_run,
                report.handshakes.len(),
                report.packets.delivered,
                report.packets.originated,
                if report.security_violation { "SECURITY VIOLATION" } else { "no violation" },
            )
            .map_err(io)?;
        }
        None => out.write_all(json.as_bytes()).map_err(io)?,
    }
    Ok(if report.security_violation {
        EXIT_VIOLATION
    } else {
        EXIT_OK
    })
}

#[derive(Serialize)]
struct KeySizeRow {
    security_bits: u32,
    ecc_key_bits: u32,
    rsa_key_bits: u32,
}

pub fn keysize_rows() -> Vec<(u32, u32, u32)> {
    SecurityLevel::all()
        .map(|l| {
            (
                l.bits(),
                key_material_size(KeyScheme::Ecc, l),
                key_material_size(KeyScheme::Rsa, l),
            )
        })
        .collect()
}

fn keysize_table(format: TableFormat, out: &mut dyn Write) -> Result<i32, String> {
    let rows = keysize_rows();
    let text = match format {
        TableFormat::Text => {
            let mut s = format!("{:<14}{:>6}{:>8}\n", "Security bits", "ECC", "RSA");
            for (bits, ecc, rsa) in rows {
                s += &format!("{bits:<14}{ecc:>6}{rsa:>8}\n");
            }
            s
        }
        TableFormat::Json => {
            let rows: Vec<KeySizeRow> = rows
                .into_iter()
                .map(|(security_bits, ecc_key_bits, rsa_key_bits)| KeySizeRow {
                    security_bits,
                    ecc_key_bits,
                    rsa_key_bits,
                })
                .collect();
            serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"
        }
    };
    out.write_all(text.as_bytes()).map_err(|e| e.to_string())?;
    Ok(EXIT_OK)
}

fn demo_handshake(curve: Curve, verbose: bool, out: &mut dyn Write) -> Result<i32, String> {
    let (registry, server, client) = provision_pair(curve.clone(), 1);
    let initiator = LoopbackParty::new(
        HandshakeConfig::new(curve.clone(), client).expect_peer(LOOPBACK_SERVER_ID),
        sha256(&[b"demo/initiator"]),
    );
    let responder = LoopbackParty::new(
        HandshakeConfig::new(curve.clone(), server),
        sha256(&[b"demo/responder"]),
    );
    let outcome = run_loopback(&registry, initiator, responder, |_, _, _| {});
    let io = |e: std::io::Error| e.to_string();
    writeln!(out, "handshake on {}", curve.name()).map_err(io)?;
    let mut total = 0;
    for f in &outcome.flights {
        let arrow = match f.sender {
            Role::Initiator => "client -> server",
            Role::Responder => "server -> client",
        };
        let number = f.flight.map_or("?".to_string(), |n| n.to_string());
        total += f.bytes.len();
        writeln!(
            out,
            "flight {number}  {arrow}  {:>5} bytes  {}",
            f.bytes.len(),
            f.messages.join(", ")
        )
        .map_err(io)?;
        if verbose {
            for chunk in f.bytes.chunks(32) {
                writeln!(out, "    {}", hex::encode(chunk)).map_err(io)?;
            }
        }
    }
    writeln!(out, "total {total} bytes").map_err(io)?;
    match (outcome.initiator_keys(), outcome.responder_keys()) {
        (Some(a), Some(b)) if a == b => {
            writeln!(out, "established, session id {}", hex::encode(a.session_id)).map_err(io)?;
            Ok(EXIT_OK)
        }
        _ => {
            let reason = outcome
                .initiator
                .failure()
                .or(outcome.responder.failure())
                .map_or("incomplete".to_string(), |e| e.to_string());
            writeln!(out, "failed: {reason}").map_err(io)?;
            Ok(EXIT_VIOLATION)
        }
    }
}
