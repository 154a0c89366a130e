//! The `dlrm` command line: benchmark and training runs plus trace tools.

pub mod args;
pub mod report;
pub mod run;

use std::io::Write;
use std::path::Path;

use clap::Parser;

pub use args::{parse_args, Cli, Emit, Mode, RunArgs, RunOptions, RunSpec, Tool};
pub use report::{MetricRecord, RunReport, Split};
pub use run::{run, run_benchmark, run_training};

use crate::datagen::{
    adjust_distribution, default_first_touch_threshold, generate_trace, lru_hit_rate, profile_trace, AccessId,
    TraceProfile,
};
use crate::dense::RngStream;
use crate::error::{Error, Result};

/// Reads whitespace-separated access ids.
pub fn read_trace(path: &Path) -> Result<Vec<AccessId>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        for tok in line.split_whitespace() {
            out.push(tok.parse().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("bad access id {tok:?}: {e}"),
            })?);
        }
    }
    Ok(out)
}

pub fn write_trace(path: &Path, trace: &[AccessId]) -> Result<()> {
    let mut text = String::with_capacity(trace.len() * 8);
    for a in trace {
        text.push_str(&a.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_tool(tool: Tool, out: &mut dyn Write) -> Result<()> {
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| Error::io("<output>", e));
    match tool {
        Tool::ProfileTrace { input, output } => {
            let trace = read_trace(&input)?;
            let p = profile_trace(&trace);
            p.save(&output)?;
            w(
                out,
                format!(
                    "{} accesses, {} unique, {} distinct distances",
                    trace.len(),
                    p.unique().len(),
                    p.distribution().len()
                ),
            )
        }
        Tool::GenTrace {
            profile,
            length,
            seed,
            min_first_touch,
            output,
            lru_capacities,
        } => {
            let p = TraceProfile::load(&profile)?;
            let threshold = min_first_touch.unwrap_or_else(|| default_first_touch_threshold(&p, length));
            let adjusted = adjust_distribution(&p, threshold)?;
            let trace = generate_trace(&adjusted, length, RngStream::new(seed))?;
            write_trace(&output, &trace)?;
            w(out, format!("{} accesses written, first-touch threshold {threshold}", trace.len()))?;
            for c in lru_capacities.unwrap_or_default() {
                w(out, format!("lru capacity {c}: hit rate {:.4}", lru_hit_rate(&trace, c)))?;
            }
            Ok(())
        }
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match cli.tool {
        Some(tool) => run_tool(tool, &mut out),
        None => cli.run.into_spec().and_then(|spec| {
            let report = run(&spec, &mut out)?;
            let text = match spec.options.emit {
                Emit::Json => report.to_json(),
                Emit::Text => report.to_text(),
            };
            writeln!(out, "{}", text.trim_end()).map_err(|e| Error::io("<output>", e))
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg.push_str(&format!("\n  caused by: {s}"));
                src = s.source();
            }
            eprintln!("{msg}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => 2,
                _ => 1,
            }
        }
    }
}
