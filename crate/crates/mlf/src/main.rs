use clap::Parser;

fn main() {
    let cli = match mlf::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let msg = msg.trim().trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {msg}");
            std::process::exit(mlf::AppError::Usage(String::new()).exit_status());
        }
    };
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = mlf::cli::run(cli, &mut stdout) {
        eprintln!("error[{}]: {e}", e.code());
        std::process::exit(e.exit_status());
    }
}
