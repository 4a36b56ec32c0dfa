use clap::Parser;
use vws_cli::{execute, Args};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match execute(&args) {
        Ok(manifest) => {
            println!("{} files written to {}", manifest.files.len(), args.out.as_ref().map_or_else(
                || "the configured directory".to_string(),
                |p| p.display().to_string(),
            ));
        }
        Err(e) => {
            eprintln!("vws {}: {e}", args.command);
            std::process::exit(e.exit_code());
        }
    }
}
