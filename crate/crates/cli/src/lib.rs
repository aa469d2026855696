//! Command implementations and the HTTP service of the `motif-search` tool.

pub mod commands;
pub mod server;

/// Applies the `MOTIF_SEARCH_THREADS` worker cap, if set.
pub fn init_threads_from_env() -> anyhow::Result<Option<usize>> {
    match std::env::var("MOTIF_SEARCH_THREADS") {
        Ok(v) => {
            let n = v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    motif_search::Error::InvalidArgument(format!(
                        "MOTIF_SEARCH_THREADS must be a positive integer, got {v:?}"
                    ))
                })?;
            motif_search::par::init_threads(n);
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

/// Single-line `kind: message` form of an error, for the CLI prefix.
pub fn error_line(e: &anyhow::Error) -> String {
    let kind = e
        .downcast_ref::<motif_search::Error>()
        .map(|c| c.kind())
        .unwrap_or("cli");
    let msg = format!("{e:#}").replace('\n', " ");
    format!("error: {kind}: {msg}")
}
