use std::io::{self, BufRead, Write};
use std::process::ExitCode;

use clap::Parser;
use spw_control::cli::{run_parsed, Cli, Command};
use spw_control::config::ServiceConfig;
use spw_control::{api, ControlService, RemoteBackend, SimHandle, BRING_UP_TICKS};

fn load_config(cli: &Cli) -> Result<ServiceConfig, String> {
    match &cli.config {
        Some(path) => ServiceConfig::load(path),
        None => ServiceConfig::from_env(),
    }
    .map_err(|e| e.to_string())
}

fn serve(config: ServiceConfig, listen: Option<String>) -> Result<(), String> {
    let addr = listen.unwrap_or_else(|| config.listen.clone());
    let auto = config.auto_tick.then_some(config.auto_tick_rate);
    let tb = config.testbed_config().map_err(|e| e.to_string())?;
    let sim = SimHandle::spawn_with(tb, auto, |svc| svc.bring_up(BRING_UP_TICKS))
        .map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| format!("{addr}: {e}"))?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(|e| e.to_string())?);
        api::serve(listener, sim).await.map_err(|e| e.to_string())
    })
}

fn shell(svc: &mut ControlService) -> i32 {
    let stdin = io::stdin();
    let mut status = 0;
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if words.is_empty() || words[0].starts_with('#') {
            continue;
        }
        if words[0] == "exit" || words[0] == "quit" {
            break;
        }
        status = spw_control::run_cli(svc, &words, &mut io::stdout(), &mut io::stderr());
        let _ = io::stdout().flush();
    }
    status
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match (&cli.command, &cli.remote) {
        (Command::Serve { listen }, _) => match load_config(&cli).and_then(|c| serve(c, listen.clone())) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
        (_, Some(url)) => {
            if matches!(cli.command, Command::Shell) {
                eprintln!("error: shell runs against a local simulation only");
                2
            } else {
                run_parsed(&mut RemoteBackend::new(url), &cli, &mut io::stdout(), &mut io::stderr())
            }
        }
        (_, None) => {
            let config = match load_config(&cli) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let tb = match config.testbed_config() {
                Ok(tb) => tb,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let mut svc = match ControlService::new(tb) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            if !cli.cold {
                if let Err(e) = svc.bring_up(BRING_UP_TICKS) {
                    eprintln!("error: bring-up failed: {e}");
                    return ExitCode::from(1);
                }
            }
            if matches!(cli.command, Command::Shell) {
                shell(&mut svc)
            } else {
                run_parsed(&mut svc, &cli, &mut io::stdout(), &mut io::stderr())
            }
        }
    };
    ExitCode::from(code as u8)
}
