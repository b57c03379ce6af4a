//! `bevseg` command-line driver.

mod args;
mod commands;

use std::process::ExitCode;

fn init_threads(n: Option<usize>) -> Result<(), String> {
    #[cfg(feature = "parallel")]
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let inv = match args::parse(&argv, std::env::var("BEVSEG_OUT").ok()) {
        Ok(inv) => inv,
        Err(args::UsageError(msg)) => {
            eprintln!("error: {msg}\n\n{}", args::USAGE);
            return ExitCode::from(1);
        }
    };
    if let Err(e) = init_threads(inv.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match commands::dispatch(&inv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            if f.exit_code() == 1 {
                eprintln!("\n{}", args::USAGE);
            }
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
