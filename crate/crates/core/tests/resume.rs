use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clinex_core::inference::{
    run_batch, BatchOptions, ChatClient, ChatRequest, FnTransport, InferenceError, ModelEndpoint, Setup,
    TransportFailure,
};
use clinex_core::schema::{ClinicalReport, Language};

fn reports(n: usize) -> Vec<ClinicalReport> {
    (0..n)
        .map(|i| ClinicalReport::new(format!("c{i:03}"), Language::En, format!("Case c{i:03}: age {i}.")).unwrap())
        .collect()
}

fn answer(req: &ChatRequest) -> Result<String, TransportFailure> {
    let text = &req.messages[1].content;
    let id = text.split("Case ").nth(1).unwrap().split(':').next().unwrap();
    Ok(format!(r#"{{"age": "{id}"}}"#))
}

fn client(calls: Arc<AtomicUsize>, stop_after: Option<(usize, Arc<AtomicBool>)>) -> ChatClient {
    let transport = FnTransport(move |req: &ChatRequest| {
        let n = calls.fetch_add(1, Ordering::SeqCst) + 1;
        if let Some((limit, stop)) = &stop_after {
            if n >= *limit {
                stop.store(true, Ordering::SeqCst);
            }
        }
        answer(req)
    });
    let mut endpoint = ModelEndpoint::new("http://unused", "m");
    endpoint.retry.base_backoff = Duration::from_millis(1);
    ChatClient::with_transport(endpoint, Arc::new(transport)).unwrap()
}

fn strip(mut v: Vec<clinex_core::inference::ExtractionResult>) -> Vec<clinex_core::inference::ExtractionResult> {
    for r in &mut v {
        r.latency = Duration::ZERO;
    }
    v
}

#[test]
fn interrupted_batch_resumes_without_repeating_work() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.jsonl");
    let input = reports(20);

    let stop = Arc::new(AtomicBool::new(false));
    let first_calls = Arc::new(AtomicUsize::new(0));
    let first = client(first_calls.clone(), Some((7, stop.clone())));
    let options = BatchOptions {
        limit: 1,
        journal: Some(journal.clone()),
        stop: Some(stop),
        ..Default::default()
    };
    let err = run_batch(&first, &input, &Setup::Naive, &options).unwrap_err();
    assert!(matches!(err, InferenceError::Interrupted { completed: 7 }), "{err}");

    // simulate a torn final write
    let mut text = std::fs::read_to_string(&journal).unwrap();
    text.push_str("{\"sample_id\":\"c01");
    std::fs::write(&journal, text).unwrap();

    let second_calls = Arc::new(AtomicUsize::new(0));
    let second = client(second_calls.clone(), None);
    let options = BatchOptions {
        limit: 3,
        journal: Some(journal.clone()),
        ..Default::default()
    };
    let resumed = run_batch(&second, &input, &Setup::Naive, &options).unwrap();
    assert_eq!(second_calls.load(Ordering::SeqCst), 13);

    let fresh = run_batch(&client(Arc::new(AtomicUsize::new(0)), None), &input, &Setup::Naive, &BatchOptions { limit: 4, ..Default::default() }).unwrap();
    assert_eq!(strip(resumed), strip(fresh));
}

#[test]
fn failed_entries_are_retried_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("j.jsonl");
    let input = reports(4);
    let failing = ChatClient::with_transport(
        {
            let mut e = ModelEndpoint::new("http://unused", "m");
            e.retry.max_attempts = 1;
            e
        },
        Arc::new(FnTransport(|req: &ChatRequest| {
            if req.messages[1].content.contains("c002") {
                Err(TransportFailure::Timeout)
            } else {
                answer(req)
            }
        })),
    )
    .unwrap();
    let options = BatchOptions {
        limit: 2,
        journal: Some(journal.clone()),
        ..Default::default()
    };
    let first = run_batch(&failing, &input, &Setup::Naive, &options).unwrap();
    assert!(first[2].is_failed());

    let calls = Arc::new(AtomicUsize::new(0));
    let second = run_batch(&client(calls.clone(), None), &input, &Setup::Naive, &options).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 1);
    assert!(second.iter().all(|r| r.parsed().is_some()));
}
