use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = vqdd::cli::run(std::env::args_os().collect(), &mut out);
    let _ = out.flush();
    if let Err(e) = result {
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error[{}] exit={}: {msg}", e.kind(), e.exit_code());
        std::process::exit(e.exit_code());
    }
}
