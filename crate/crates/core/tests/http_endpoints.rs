mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{chat_reply, last_message, FakeApi};
use forge_core::client::{ChatClient, ChatRequest, ClientError, HttpEndpoint, Message, OpenAiChat, RetryPolicy};
use forge_core::distractor::MCQItem;
use forge_core::embed::{embed_texts, EmbeddingStore, ProviderConfig};
use forge_core::eval::{evaluate_dataset, AnswerCache, ChatAnswerer, EvalConfig, EvalError, ModelSpec, PromptTemplate};
use forge_core::segment::{ConjunctionEntry, SentenceCompletionPair};
use forge_core::validate::{Judge, JudgeConfig, VerdictCache};
use serde_json::json;

fn request(content: &str) -> ChatRequest {
    ChatRequest {
        model: "m".into(),
        messages: vec![Message::system("sys"), Message::user(content)],
        temperature: 0.0,
        max_tokens: Some(8),
    }
}

#[test]
fn chat_sends_bearer_key_from_env_and_reads_content() {
    std::env::set_var("FORGE_TEST_KEY_CHAT", "sekret");
    let api = FakeApi::start(|req, _| {
        assert_eq!(req.path, "/v1/chat/completions");
        (200, chat_reply(&format!("echo {}", last_message(req))))
    });
    let client = OpenAiChat::new(HttpEndpoint::new(&api.url, Some("FORGE_TEST_KEY_CHAT"), Duration::from_secs(5)));
    assert_eq!(client.chat(&request("hi")).unwrap(), "echo hi");
    let reqs = api.requests.lock().unwrap();
    assert_eq!(reqs[0].auth.as_deref(), Some("Bearer sekret"));
    assert_eq!(reqs[0].body["model"], "m");
    assert_eq!(reqs[0].body["temperature"], 0.0);
    assert_eq!(reqs[0].body["max_tokens"], 8);
    assert_eq!(reqs[0].body["messages"][0]["role"], "system");
}

#[test]
fn missing_key_variable_sends_no_auth_header() {
    let api = FakeApi::start(|_, _| (200, chat_reply("ok")));
    let client = OpenAiChat::new(HttpEndpoint::new(&api.url, Some("FORGE_TEST_KEY_UNSET_XYZ"), Duration::from_secs(5)));
    client.chat(&request("x")).unwrap();
    assert_eq!(api.requests.lock().unwrap()[0].auth, None);
}

#[test]
fn server_errors_are_retried_and_client_errors_are_not() {
    let api = FakeApi::start(|_, n| if n < 2 { (503, json!({"error": "busy"})) } else { (200, chat_reply("fine")) });
    let client = OpenAiChat::new(HttpEndpoint::new(&api.url, None, Duration::from_secs(5)));
    let out = RetryPolicy::new(3, 0).run(|| client.chat(&request("x"))).unwrap();
    assert_eq!((out.as_str(), api.calls()), ("fine", 3));

    let api = FakeApi::start(|_, _| (400, json!({"error": "bad"})));
    let client = OpenAiChat::new(HttpEndpoint::new(&api.url, None, Duration::from_secs(5)));
    let err = RetryPolicy::new(3, 0).run(|| client.chat(&request("x"))).unwrap_err();
    assert!(matches!(err, ClientError::Status { code: 400, .. }));
    assert_eq!(api.calls(), 1);
}

#[test]
fn malformed_reply_is_a_protocol_error() {
    let api = FakeApi::start(|_, _| (200, json!({"choices": []})));
    let client = OpenAiChat::new(HttpEndpoint::new(&api.url, None, Duration::from_secs(5)));
    assert!(matches!(client.chat(&request("x")), Err(ClientError::Protocol(_))));
}

#[test]
fn unreachable_endpoint_is_an_outage() {
    // bind then drop to get a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = OpenAiChat::new(HttpEndpoint::new(&format!("http://127.0.0.1:{port}/v1"), None, Duration::from_secs(2)));
    let err = client.chat(&request("x")).unwrap_err();
    assert!(err.is_outage(), "{err}");
}

fn fake_vector(text: &str) -> Vec<f64> {
    let n = text.chars().count() as f64;
    vec![n, 1.0, (n % 7.0) + 1.0]
}

#[test]
fn embeddings_are_batched_normalized_and_cached() {
    std::env::set_var("FORGE_TEST_KEY_EMBED", "ek");
    let api = FakeApi::start(|req, _| {
        assert_eq!(req.path, "/v1/embeddings");
        assert_eq!(req.body["model"], "fake-embed");
        let inputs = req.body["input"].as_array().unwrap();
        // answer in reverse order: the client must sort by index
        let data: Vec<_> = inputs
            .iter()
            .enumerate()
            .rev()
            .map(|(i, t)| json!({"index": i, "embedding": fake_vector(t.as_str().unwrap())}))
            .collect();
        (200, json!({ "data": data }))
    });
    let cfg = ProviderConfig {
        endpoint: api.url.clone(),
        model_name: "fake-embed".into(),
        batch_size: 2,
        api_key_env: "FORGE_TEST_KEY_EMBED".into(),
        ..Default::default()
    };
    let provider = cfg.provider();
    let dir = tempfile::tempdir().unwrap();
    let store = EmbeddingStore::open(dir.path(), provider.name(), provider.model()).unwrap();
    let texts = ["a", "bbb", "cc", "dddd", "bbb"];
    let recs = embed_texts(&texts, provider.as_ref(), &store, &cfg).unwrap();
    assert_eq!(recs.len(), 5);
    for (rec, t) in recs.iter().zip(texts) {
        let raw = fake_vector(t);
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in rec.vector.iter().zip(&raw) {
            assert!((*a as f64 - b / norm).abs() < 1e-6);
        }
    }
    // four distinct texts in batches of two
    assert_eq!(api.calls(), 2);
    assert_eq!(api.requests.lock().unwrap()[0].auth.as_deref(), Some("Bearer ek"));

    embed_texts(&texts, provider.as_ref(), &store, &cfg).unwrap();
    assert_eq!(api.calls(), 2, "cached texts must not be re-requested");
}

fn pair(prefix: &str, completion: &str, conj: &str) -> SentenceCompletionPair {
    SentenceCompletionPair::new(prefix.into(), completion.into(), conj.into(), "src".into(), "doc".into())
}

#[test]
fn judge_filters_through_the_endpoint_and_caches_verdicts() {
    let api = FakeApi::start(|req, _| {
        let prompt = last_message(req);
        let reply = if prompt.contains("QQINCOMPLETE") { "خیر" } else { "بله" };
        (200, chat_reply(reply))
    });
    let cfg = JudgeConfig {
        endpoint: api.url.clone(),
        model_name: "judge-x".into(),
        backoff_base_ms: 0,
        max_parallel_requests: 2,
        ..Default::default()
    };
    let pairs = vec![
        pair("هوا سرد بود و ما در خانه ماندیم زیرا", "برف سنگینی می‌بارید.", "زیرا"),
        pair("کار را زود تمام کردیم و به خانه رفتیم چون", "QQINCOMPLETE", "چون"),
        pair("او دیر رسید و جلسه را از دست داد اما", "دوباره تلاش کرد.", "اما"),
    ];
    let mut amb = ConjunctionEntry::new("چون");
    amb.ambiguous = true;
    let lexicon = vec![ConjunctionEntry::new("زیرا"), amb, ConjunctionEntry::new("اما")];
    let dir = tempfile::tempdir().unwrap();
    let cache_path = dir.path().join("verdicts.jsonl");

    let judge = Judge::new(Arc::new(cfg.http_client()), cfg.clone(), VerdictCache::open(&cache_path).unwrap()).unwrap();
    let out = judge.filter_pairs(&pairs, &lexicon).unwrap();
    assert_eq!(out.kept.len(), 2);
    assert_eq!(out.report.completeness_rejections, 1);
    // two unambiguous pairs get one check, the ambiguous one gets two
    assert_eq!(api.calls(), 4);

    let judge = Judge::new(Arc::new(cfg.http_client()), cfg, VerdictCache::open(&cache_path).unwrap()).unwrap();
    let again = judge.filter_pairs(&pairs, &lexicon).unwrap();
    assert_eq!(again.kept, out.kept);
    assert_eq!(api.calls(), 4, "verdicts come from the cache on rerun");
}

fn item(id: &str, gold: usize) -> MCQItem {
    MCQItem {
        item_id: id.into(),
        prefix: format!("جملهٔ {id} چون"),
        options: vec!["الف".into(), "ب".into(), "پ".into(), "ت".into()],
        gold_index: gold,
        conjunction: "چون".into(),
        source_id: "s".into(),
        split: None,
        distractor_pair_ids: vec![],
    }
}

#[test]
fn answer_model_over_http_scores_strict_and_lenient() {
    // item ids ending in an even digit get a verbose reply
    let api = FakeApi::start(|req, _| {
        let prompt = last_message(req);
        let verbose = ["0", "2", "4", "6", "8"].iter().any(|d| prompt.contains(&format!("item{d} ")));
        (200, chat_reply(if verbose { "پاسخ درست گزینه ۲ است" } else { "۲" }))
    });
    let spec = ModelSpec {
        endpoint: api.url.clone(),
        model_name: "answer-x".into(),
        backoff_base_ms: 0,
        max_parallel_requests: 3,
        ..Default::default()
    };
    let items: Vec<MCQItem> = (0..10).map(|i| item(&format!("item{i}"), 1)).collect();
    let answerer = ChatAnswerer::from_spec(spec);
    let out = evaluate_dataset(&items, &answerer, &PromptTemplate::default(), &[], &EvalConfig::default(), None).unwrap();
    assert_eq!(out.report.strict_acc, 0.5);
    assert_eq!(out.report.pp_acc, 1.0);
    let sys = &api.requests.lock().unwrap()[0].body["messages"][0];
    assert_eq!(sys["role"], "system");
}

#[test]
fn eval_outage_keeps_finished_answers_for_the_rerun() {
    let api = FakeApi::start(|_, n| if n < 3 { (200, chat_reply("1")) } else { (503, json!({})) });
    let spec = ModelSpec {
        endpoint: api.url.clone(),
        retry_limit: 1,
        backoff_base_ms: 0,
        max_parallel_requests: 1,
        ..Default::default()
    };
    let items: Vec<MCQItem> = (0..6).map(|i| item(&format!("q{i}"), 0)).collect();
    let dir = tempfile::tempdir().unwrap();
    let cache = AnswerCache::open(&dir.path().join("answers.jsonl")).unwrap();
    let answerer = ChatAnswerer::from_spec(spec);
    let err = evaluate_dataset(&items, &answerer, &PromptTemplate::default(), &[], &EvalConfig { max_parallel_requests: 1, ..Default::default() }, Some(&cache));
    assert!(matches!(err, Err(EvalError::Unreachable(_))));
    assert_eq!(cache.len(), 3);
}
