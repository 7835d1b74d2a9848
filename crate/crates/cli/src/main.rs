use std::process::ExitCode;

fn main() -> ExitCode {
    let result = jko_cli::parse_config(std::env::args_os()).and_then(|cfg| {
        let stdout = std::io::stdout();
        jko_cli::execute(&cfg, &mut stdout.lock())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(jko_cli::CliError::Clap(e)) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
