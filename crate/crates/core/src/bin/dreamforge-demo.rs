//! Runs the demo workflow into a session folder and prints one hash per
//! output.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use dreamforge::demo::{run_demo, DemoConfig};
use dreamforge::model::{MockProvider, MOCK_PROVIDER};
use dreamforge::provenance::import_cache;
use dreamforge::{LogLevel, Mode, ProviderRegistry, Session, SessionOptions};

#[derive(Parser)]
#[command(name = "dreamforge-demo", version)]
struct Args {
    /// Session folder.
    dir: PathBuf,
    /// Number of synthetic abstracts.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Serve model calls from the prompt cache only, with transport disabled.
    #[arg(long)]
    replay: bool,
    /// Load a `cache.jsonl` into the session's prompt cache first.
    #[arg(long)]
    import_cache: Option<PathBuf>,
    /// Abort the process on the model call after the first N.
    #[arg(long)]
    abort_after_calls: Option<u64>,
    #[arg(long, default_value_t = 8)]
    in_flight: usize,
    #[arg(long, default_value_t = 100)]
    progress_interval: usize,
    #[arg(long, default_value = "warn")]
    log_level: LogLevel,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let providers = ProviderRegistry::with_defaults();
    if let Some(n) = args.abort_after_calls {
        providers.register(MOCK_PROVIDER, Arc::new(MockProvider::new().aborting_after(n)));
    }
    if args.replay {
        providers.disable_transport();
    }
    let options = SessionOptions {
        log_level: args.log_level,
        mode: if args.replay { Mode::Replay } else { Mode::Live },
        providers: providers.clone(),
        in_flight: args.in_flight.max(1),
        progress_interval: args.progress_interval.max(1),
        ..SessionOptions::default()
    };
    let result = (|| {
        let session = Session::open_with(&args.dir, options)?;
        if let Some(path) = &args.import_cache {
            import_cache(&session, path)?;
        }
        let cfg = DemoConfig {
            n: args.n,
            ..DemoConfig::default()
        };
        let outputs = run_demo(&session, &cfg)?;
        let summary = outputs.summary()?;
        session.close()?;
        Ok::<_, dreamforge::Error>(summary)
    })();
    match result {
        Ok(summary) => {
            for (name, hash) in summary {
                println!("{name} {hash}");
            }
            println!("transport-calls {}", providers.transport_calls());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
