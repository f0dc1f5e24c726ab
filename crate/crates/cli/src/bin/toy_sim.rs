//! Serves a built-in toy model over the simulator side of the wire protocol.

use std::io::{self, BufReader, BufWriter};
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use simtrace::models::{builtin, BUILTIN_MODELS};
use simtrace::sim::serve;
use simtrace::Model;

#[derive(Parser)]
#[command(
    name = "toy-sim",
    about = "Serve a toy simulator to a simtrace controller"
)]
struct Args {
    /// One of: conjugate, discrete, cascade.
    #[arg(long)]
    model: String,
    /// `tcp:<host>:<port>`, `ipc:<path>` or `stdio`.
    #[arg(long, default_value = "stdio")]
    listen: String,
    /// Exit after the first connection closes.
    #[arg(long)]
    once: bool,
}

fn serve_stream<R, W>(model: &dyn Model, reader: R, writer: W)
where
    R: io::Read,
    W: io::Write,
{
    match serve(model, BufReader::new(reader), BufWriter::new(writer)) {
        Ok(runs) => log::info!("session closed after {runs} runs"),
        Err(e) => log::warn!("session ended: {e}"),
    }
}

fn run(args: &Args, model: Arc<dyn Model>) -> io::Result<()> {
    if args.listen == "stdio" {
        serve_stream(&*model, io::stdin().lock(), io::stdout().lock());
        return Ok(());
    }
    if let Some(addr) = args.listen.strip_prefix("tcp:") {
        let listener = std::net::TcpListener::bind(addr)?;
        eprintln!("listening on tcp:{}", listener.local_addr()?);
        for conn in listener.incoming() {
            let conn = conn?;
            conn.set_nodelay(true)?;
            let reader = conn.try_clone()?;
            let model = model.clone();
            let worker = std::thread::spawn(move || serve_stream(&*model, reader, conn));
            if args.once {
                let _ = worker.join();
                break;
            }
        }
        return Ok(());
    }
    #[cfg(unix)]
    if let Some(path) = args.listen.strip_prefix("ipc:") {
        let listener = std::os::unix::net::UnixListener::bind(path)?;
        eprintln!("listening on ipc:{path}");
        for conn in listener.incoming() {
            let conn = conn?;
            let reader = conn.try_clone()?;
            let model = model.clone();
            let worker = std::thread::spawn(move || serve_stream(&*model, reader, conn));
            if args.once {
                let _ = worker.join();
                break;
            }
        }
        let _ = std::fs::remove_file(path);
        return Ok(());
    }
    Err(io::Error::new(
        io::ErrorKind::InvalidInput,
        format!("unsupported listen address {}", args.listen),
    ))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let Some(model) = builtin(&args.model) else {
        eprintln!(
            "unknown model {}; expected one of {}",
            args.model,
            BUILTIN_MODELS.join(", ")
        );
        return ExitCode::from(2);
    };
    match run(&args, model) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("toy-sim: {e}");
            ExitCode::from(3)
        }
    }
}
