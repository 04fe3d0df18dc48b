use clap::Parser;

fn main() -> std::process::ExitCode {
    match tensor_mdp_cli::run(tensor_mdp_cli::Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
