use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let out = w2w_cli::run(std::env::args_os());
    if out.code == w2w_cli::EXIT_OK {
        print!("{}", out.stdout);
    } else {
        eprint!("{}", out.stdout);
    }
    let _ = std::io::stdout().flush();
    ExitCode::from(out.code as u8)
}
