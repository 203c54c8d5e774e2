mod args;
mod commands;
mod pipeline;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use jmsi::{Error, ErrorClass};

use args::{Cli, Command};

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

/// Caps rayon's worker count from `JMSI_THREADS`.
fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("JMSI_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("JMSI_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Invalid(e.to_string()))
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::BuildCorpus(a) => commands::build_corpus(&a),
        Command::SynthCorpus(a) => commands::synth_corpus(&a),
        Command::BuildVocab(a) => commands::build_vocab_cmd(&a).map(|_| ()),
        Command::Sample(a) => commands::sample(&a),
        Command::Pretrain(a) => commands::pretrain_cmd(&a),
        Command::Finetune(a) => commands::finetune_cmd(&a),
        Command::Evaluate(a) => commands::evaluate_cmd(&a),
        Command::Rerank(a) => commands::rerank_cmd(&a),
        Command::CostModel(a) => commands::cost_model(&a),
        Command::CountParams(a) => commands::count_params(&a),
        Command::Pipeline(a) => {
            let cfg = pipeline::PipelineConfig::load(&a.config)?;
            let out = a
                .out
                .or_else(|| cfg.out.clone())
                .ok_or_else(|| Error::InvalidConfig("pipeline needs --out or an `out` key".into()))?;
            let summary = pipeline::run_pipeline(&cfg, &out)?;
            println!("stages: {} -> {}", summary.stages.join(", "), out.join("summary.json").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = configure_threads().and_then(|()| dispatch(cli.command));
    commands::flush_stdout();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
