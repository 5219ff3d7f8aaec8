use std::io;
use std::process;

fn main() {
    let stdin = io::stdin();
    let stdout = io::stdout();
    let code = polevent::run(
        std::env::args_os(),
        &mut polevent::Io {
            stdin: &mut stdin.lock(),
            stdout: &mut stdout.lock(),
            // Left unlocked: tracing writes here from reqwest's worker thread too.
            stderr: &mut io::stderr(),
        },
    );
    process::exit(code);
}
