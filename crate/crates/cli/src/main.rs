mod args;
mod commands;

use clap::Parser;
use log::info;

use args::{Cli, Command};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    info!("{:?}", cli.command);
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::ExtractMasklets(a) => commands::extract_masklets_cmd(a),
        Command::BuildBank(a) => commands::build_bank(a),
        Command::TrainCodec(a) => commands::train_codec_cmd(a),
        Command::BuildGt(a) => commands::build_gt(a),
        Command::TrainLang(a) => commands::train_lang(a),
        Command::Query(a) => commands::query(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
