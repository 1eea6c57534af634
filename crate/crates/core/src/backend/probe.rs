use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{CacheError, ChoiceProbe, FirstTokenBackend, ProbeCache, ProbeKey};
use crate::dataset::{Dataset, Question};
use crate::prompting::{render_all, Phrasing};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeOptions {
    pub phrasings: Vec<Phrasing>,
    pub concurrency: usize,
    pub top_k: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            phrasings: vec![Phrasing::One],
            concurrency: 4,
            top_k: 10,
        }
    }
}

/// One key that could not be probed; also the error-log line format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeFailure {
    pub question_id: String,
    pub phrasing: Phrasing,
    pub permutation_id: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProbeSummary {
    pub total_keys: usize,
    pub skipped: usize,
    pub written: usize,
    pub failures: Vec<ProbeFailure>,
    pub backend_calls: usize,
}

impl ProbeSummary {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

fn probe_one(
    backend: &dyn FirstTokenBackend,
    q: &Question,
    phrasing: Phrasing,
    top_k: usize,
    calls: &AtomicUsize,
) -> Result<ChoiceProbe, ProbeFailure> {
    let identity = backend.identity();
    let mut distributions = Vec::with_capacity(6);
    for prompt in render_all(q, phrasing, identity.label_style) {
        calls.fetch_add(1, Ordering::Relaxed);
        let dist = backend
            .query_first_token(&prompt, top_k)
            .map_err(|e| ProbeFailure {
                question_id: q.id.clone(),
                phrasing,
                permutation_id: prompt.permutation_id,
                error: e.to_string(),
            })?;
        distributions.push(dist);
    }
    Ok(ChoiceProbe {
        question_id: q.id.clone(),
        phrasing,
        backend: identity.clone(),
        distributions,
        timestamp: backend
            .timestamps_probes()
            .then(|| chrono::Utc::now().to_rfc3339()),
    })
}

/// Probes every (question, phrasing) pair missing from `cache`.
///
/// Up to `concurrency` keys are in flight at once. Results are committed by
/// this thread alone, in dataset order, so a deterministic backend yields a
/// byte-identical cache. A key whose query fails is logged to `error_log`
/// and skipped; the batch carries on. `progress` receives
/// `(finished, pending, failures)` after each key.
pub fn run_probe(
    ds: &Dataset,
    backend: &dyn FirstTokenBackend,
    cache: &mut ProbeCache,
    error_log: Option<&Path>,
    opts: &ProbeOptions,
    mut progress: impl FnMut(usize, usize, usize),
) -> Result<ProbeSummary, CacheError> {
    let identity = backend.identity().clone();
    let mut summary = ProbeSummary::default();
    let mut pending: Vec<(&Question, Phrasing)> = Vec::new();
    for q in &ds.questions {
        for &phrasing in &opts.phrasings {
            summary.total_keys += 1;
            let key = ProbeKey {
                question_id: q.id.clone(),
                phrasing,
                backend: identity.clone(),
            };
            if cache.contains(&key) {
                summary.skipped += 1;
            } else {
                pending.push((q, phrasing));
            }
        }
    }
    if pending.is_empty() {
        return Ok(summary);
    }

    let mut log = match error_log {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|source| CacheError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| CacheError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
            Some((path, file))
        }
        None => None,
    };

    let next = AtomicUsize::new(0);
    let calls = AtomicUsize::new(0);
    let workers = opts.concurrency.clamp(1, pending.len());
    let (tx, rx) = mpsc::channel();

    let committed = thread::scope(|scope| -> Result<(), CacheError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, calls, pending) = (&next, &calls, &pending);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(q, phrasing)) = pending.get(i) else {
                    break;
                };
                let result = probe_one(backend, q, phrasing, opts.top_k, calls);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut reorder = BTreeMap::new();
        let mut cursor = 0;
        for (i, result) in rx {
            reorder.insert(i, result);
            while let Some(result) = reorder.remove(&cursor) {
                match result {
                    Ok(probe) => {
                        if cache.append(probe)? {
                            summary.written += 1;
                        }
                    }
                    Err(failure) => {
                        if let Some((path, file)) = log.as_mut() {
                            let line = serde_json::to_string(&failure).expect("failure serializes");
                            writeln!(file, "{line}")
                                .and_then(|_| file.sync_data())
                                .map_err(|source| CacheError::Io {
                                    path: path.to_path_buf(),
                                    source,
                                })?;
                        }
                        summary.failures.push(failure);
                    }
                }
                cursor += 1;
                progress(cursor, pending.len(), summary.failures.len());
            }
        }
        Ok(())
    });
    summary.backend_calls = calls.load(Ordering::Relaxed);
    committed?;
    Ok(summary)
}
