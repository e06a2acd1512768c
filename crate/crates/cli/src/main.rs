mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;
use log::{error, info};
use stm_core::{Result, StmError};

use args::{Cli, Command};
use config::CliConfig;

fn run(cli: &Cli) -> Result<i32> {
    if let Some(threads) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| StmError::invalid(format!("thread pool: {e}")))?;
    }
    let config = CliConfig::resolve(&cli.global)?;
    info!("resolved configuration:\n{}", config.to_toml());
    let out = &cli.global.out;
    match &cli.command {
        Command::Pretrain(a) => commands::pretrain_cmd(a, &config, out),
        Command::Train(a) => commands::train_cmd(a, &config, out),
        Command::Infer(a) => commands::infer_cmd(a, &config, out),
        Command::Eval(a) => commands::eval_cmd(a, &config, out),
        Command::Bench(a) => commands::bench_cmd(a, &config, out),
        Command::Gradcheck => commands::gradcheck_cmd(&config, out),
        Command::SynthGen(a) => commands::synth_gen_cmd(a, &config, out),
        Command::VizAttn(a) => commands::viz_attn_cmd(a, &config, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
