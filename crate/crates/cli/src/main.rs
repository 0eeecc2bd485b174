//! `phoneloc`: simulate, calibrate, build datasets, train and evaluate.

mod commands;
mod settings;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Data(phoneloc::Error),
}

impl From<phoneloc::Error> for CliError {
    fn from(e: phoneloc::Error) -> Self {
        CliError::Data(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(phoneloc::Error::DivergenceDetected { .. }) => 3,
            CliError::Io(_) | CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

fn cli(cmds: &[commands::Command]) -> clap::Command {
    let mut app = clap::Command::new("phoneloc")
        .about("Camera-supervised pedestrian localization from phone sensors")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for c in cmds {
        let mut sub = clap::Command::new(c.name).about(c.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("Flat key = value file; flags take precedence"),
        );
        for k in &c.keys {
            let help = match k.default {
                Some(d) => format!("{} [default: {d}]", k.help),
                None => format!("{} [required]", k.help),
            };
            sub = sub.arg(Arg::new(k.name).long(k.name).value_name("VALUE").action(ArgAction::Set).help(help));
        }
        app = app.subcommand(sub);
    }
    app
}

fn run(args: Vec<String>) -> Result<(), CliError> {
    let cmds = commands::commands();
    let matches = match cli(&cmds).try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { Ok(()) } else { Err(CliError::Usage("see --help".into())) };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cmd = cmds.iter().find(|c| c.name == name).expect("registered subcommand");
    let flags: BTreeMap<String, String> = cmd
        .keys
        .iter()
        .filter_map(|k| sub.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    let file = sub.get_one::<String>("config").map(PathBuf::from);
    let settings = match settings::Settings::resolve(cmd.name, &cmd.keys, file.as_deref(), flags) {
        Ok(s) => s,
        Err(e) => {
            if let Some(sub) = cli(&cmds).find_subcommand_mut(name) {
                let mut sub = sub.clone().bin_name(format!("phoneloc {name}"));
                eprintln!("{}", sub.render_help());
            }
            return Err(e);
        }
    };
    (cmd.run)(&settings)
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(&e, CliError::Usage(m) if m == "see --help") {
                eprintln!("phoneloc: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
