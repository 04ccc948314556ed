use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches};

mod commands;
mod config;

use config::{Command, ConfigError, RunConfig, COMMANDS, KEYS};

fn cli() -> clap::Command {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("flat key=value config file; flags override its values")];
    for (key, default, help) in KEYS {
        let flag = key.replace('_', "-");
        let mut arg = Arg::new(*key)
            .long(flag.clone())
            .value_name("VALUE")
            .action(ArgAction::Set)
            .help(format!("{help} [default: {default}]"));
        if flag != *key {
            arg = arg.alias(*key);
        }
        args.push(arg);
    }
    clap::Command::new("rnlab")
        .about("Batch versus population statistics under adversarial attack")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .subcommands(
            COMMANDS
                .iter()
                .map(|(name, about)| clap::Command::new(*name).about(*about).args(args.clone())),
        )
}

fn flag_values(m: &ArgMatches) -> BTreeMap<String, String> {
    KEYS.iter()
        .filter_map(|(k, _, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect()
}

fn parse(argv: Vec<String>) -> Result<(String, RunConfig), ConfigError> {
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            let text = e.render().to_string();
            let text = text.trim_end().strip_prefix("error: ").unwrap_or(text.trim_end());
            return Err(ConfigError(text.to_string()));
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let command: Command = name.parse()?;
    let file = match sub.get_one::<String>("config") {
        Some(path) => config::read_config_file(&PathBuf::from(path))?,
        None => BTreeMap::new(),
    };
    let cfg = RunConfig::resolve(command, &file, &flag_values(sub))?;
    Ok((name.to_string(), cfg))
}

fn main() -> ExitCode {
    let (name, cfg) = match parse(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match commands::run(&name, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
