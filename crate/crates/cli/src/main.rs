//! `kvsvd` command-line front end.
//!
//! Exit status: 0 success, 2 validation error, 3 numerical-contract failure,
//! 4 I/O error. Failures print one JSON line on stderr.

mod args;
mod commands;
mod report;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::Parser;
use kvsvd::ErrorClass;

use args::{Cli, Command};
use report::{error_line, Artifacts, RunManifest, MANIFEST_FILE};

struct Failure {
    code: u8,
    line: String,
}

impl From<kvsvd::Error> for Failure {
    fn from(e: kvsvd::Error) -> Self {
        let (code, class) = match e.class() {
            ErrorClass::Validation => (2, "validation"),
            ErrorClass::Numerical => (3, "numerical"),
            ErrorClass::Io => (4, "io"),
        };
        Failure {
            code,
            line: error_line(e.kind(), class, &e.to_string()),
        }
    }
}

/// Points a recorded argument list at a different output directory.
fn redirect_out(args: &[String], out: &Path) -> Vec<String> {
    let out = out.display().to_string();
    let mut res = Vec::with_capacity(args.len() + 2);
    let mut found = false;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
            res.extend(["--out".to_string(), out.clone()]);
            found = true;
        } else if a.starts_with("--out=") {
            res.push(format!("--out={out}"));
            found = true;
        } else {
            res.push(a.clone());
        }
    }
    if !found {
        res.extend(["--out".to_string(), out]);
    }
    res
}

fn run(args: Vec<String>) -> Result<(), Failure> {
    let argv = std::iter::once("kvsvd".to_string()).chain(args.iter().cloned());
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            return Err(Failure {
                code: 2,
                line: error_line("usage", "validation", e.render().to_string().trim()),
            })
        }
    };

    if let Command::Replay(r) = &cli.command {
        let m = RunManifest::load(&r.manifest)?;
        let args = match &r.out {
            Some(out) => redirect_out(&m.args, out),
            None => m.args,
        };
        return run(args);
    }

    let start = Instant::now();
    let mut art = Artifacts::default();
    let done = commands::run(&cli.command, &mut art)?;
    let manifest = RunManifest {
        command: commands::command_name(&cli.command).to_string(),
        args,
        seeds: art.seeds,
        inputs: art.inputs,
        outputs: art.outputs,
        version: env!("CARGO_PKG_VERSION").to_string(),
        duration_secs: start.elapsed().as_secs_f64(),
    };
    let mut unused = Artifacts::default();
    unused.write_json(&done.out_dir, MANIFEST_FILE, &manifest)?;

    println!("{}", done.output.render(cli.format)?.trim_end());
    if !done.contract_ok {
        return Err(Failure {
            code: 3,
            line: error_line("bound_violation", "numerical", "empirical error exceeded the bound"),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(std::env::args().skip(1).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line);
            ExitCode::from(f.code)
        }
    }
}
