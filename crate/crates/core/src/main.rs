use std::process::ExitCode;

use wavediffur::cli;

fn main() -> ExitCode {
    match cli::run(std::env::args_os()) {
        Ok(out) => {
            print!("{}", out.stdout);
            ExitCode::from(out.code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
