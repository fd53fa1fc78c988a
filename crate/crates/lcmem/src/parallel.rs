//! Thread fan-out with results gathered in input order.

use std::ops::Range;
use std::thread;
use std::time::Instant;

use lcmem_core::atlas::{score_query_range, Atlas, AuditReport, HeadKernel, ScoreOptions};

use crate::error::Result;

/// Splits `0..n` into at most `parts` contiguous ranges of near-equal length.
pub fn partition(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.clamp(1, n.max(1));
    let (base, extra) = (n / parts, n % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Maps `f` over `items` on up to `threads` workers; output order matches input.
pub fn map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = partition(items.len(), threads)
            .into_iter()
            .map(|r| s.spawn(move || items[r].iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// One-vs-all scoring with queries split across `threads` workers. Flags,
/// scores and aggregates do not depend on the thread count.
pub fn score_one_vs_all(
    kernel: &HeadKernel,
    atlas: &Atlas,
    queries: &Atlas,
    options: &ScoreOptions,
    threads: usize,
) -> Result<AuditReport> {
    let ranges = partition(queries.rows(), threads);
    let workers = ranges.len();
    let start = Instant::now();
    let parts = map(&ranges, workers, |r| score_query_range(kernel, atlas, queries, r.clone(), options));
    let elapsed = start.elapsed().as_secs_f64();
    let parts = parts.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut report = AuditReport::merge(parts).expect("at least one partition");
    report.set_timing(elapsed, workers);
    Ok(report)
}
