use std::process::ExitCode;

fn main() -> ExitCode {
    match mtn::cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                use clap::error::ErrorKind;
                if matches!(clap_err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                    print!("{clap_err}");
                    return ExitCode::SUCCESS;
                }
                let first = clap_err.to_string();
                let line = first.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
                eprintln!("{}", line.trim());
                return ExitCode::from(2);
            }
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
