//! Wire-format tests against a throwaway local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use image::RgbImage;
use serde_json::{json, Value};

use zoomseg::backends::{
    BackendError, BackendsConfig, HttpPolicy, HttpSegmenter, ImageSource, ImageView, PolicyApi, PolicyBackend,
    RetryConfig, SegmenterBackend,
};
use zoomseg::geometry::{BBox, Frame, Point};

struct Seen {
    headers: Vec<String>,
    body: Value,
}

/// Serves the scripted `(status, body)` replies in order, one per
/// connection, and records what each request carried.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Seen { headers, body: serde_json::from_slice(&body).unwrap_or(Value::Null) });
            let mut stream = stream;
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen, handle)
}

fn config(policy: Option<&str>, seg: Option<&str>) -> BackendsConfig {
    BackendsConfig {
        policy_url: policy.map(str::to_string),
        seg_url: seg.map(str::to_string),
        bearer_token: Some("secret".into()),
        timeout_ms: 5_000,
        retry: RetryConfig { attempts: 3, backoff_ms: 1, max_backoff_ms: 2 },
        ..BackendsConfig::default()
    }
}

fn view() -> ImageView {
    let img = RgbImage::from_fn(64, 32, |x, y| image::Rgb([x as u8, y as u8, 7]));
    ImageView::new("s", Arc::new(ImageSource::Memory(Arc::new(img))), Frame::original(64, 32).unwrap())
}

#[test]
fn native_policy_round_trip() {
    let (url, seen, h) = serve(vec![(200, json!({"completions": ["a", "b"]}).to_string())]);
    let p = HttpPolicy::new(&config(Some(&url), None)).unwrap();
    let out = p.complete(&view(), "find it", 2, 0.7).unwrap();
    h.join().unwrap();
    assert_eq!(out, vec!["a", "b"]);
    let seen = seen.lock().unwrap();
    let req = &seen[0];
    assert!(req.headers[0].starts_with("POST /v1 "));
    assert!(req.headers.iter().any(|l| l.eq_ignore_ascii_case("authorization: Bearer secret")));
    assert_eq!(req.body["prompt"], "find it");
    assert_eq!(req.body["n"], 2);
    assert_eq!(req.body["temperature"], 0.7);
    let png = base64_decode(req.body["image_b64"].as_str().unwrap());
    let img = image::load_from_memory(&png).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (64, 32));
    assert_eq!(img.get_pixel(5, 9).0, [5, 9, 7]);
}

fn base64_decode(s: &str) -> Vec<u8> {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.decode(s).unwrap()
}

#[test]
fn chat_completions_adapter() {
    let reply = json!({"choices": [{"message": {"role": "assistant", "content": "<think>x</think>{}"}}]});
    let (url, seen, h) = serve(vec![(200, reply.to_string())]);
    let cfg = BackendsConfig { api: PolicyApi::ChatCompletions, model: "m7".into(), ..config(Some(&url), None) };
    let out = HttpPolicy::new(&cfg).unwrap().complete(&view(), "q", 1, 0.0).unwrap();
    h.join().unwrap();
    assert_eq!(out, vec!["<think>x</think>{}"]);
    let body = &seen.lock().unwrap()[0].body;
    assert_eq!(body["model"], "m7");
    let content = &body["messages"][0]["content"];
    assert!(content[0]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
    assert_eq!(content[1]["text"], "q");
}

#[test]
fn retries_server_errors_then_succeeds() {
    let ok = json!({"completions": ["fine"]}).to_string();
    let (url, seen, h) = serve(vec![(503, "busy".into()), (500, "oops".into()), (200, ok)]);
    let out = HttpPolicy::new(&config(Some(&url), None)).unwrap().complete(&view(), "q", 1, 0.0).unwrap();
    h.join().unwrap();
    assert_eq!(out, vec!["fine"]);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_attempts() {
    let (url, _, h) = serve(vec![(503, "a".into()), (503, "b".into()), (503, "c".into())]);
    let err = HttpPolicy::new(&config(Some(&url), None)).unwrap().complete(&view(), "q", 1, 0.0).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, BackendError::Unavailable { attempts: 3, .. }), "{err:?}");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen, h) = serve(vec![(400, "bad request".into())]);
    let err = HttpPolicy::new(&config(Some(&url), None)).unwrap().complete(&view(), "q", 1, 0.0).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, BackendError::Status(400, ref m) if m == "bad request"), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_bodies_are_typed() {
    let (url, _, h) = serve(vec![(200, "not json".into()), (200, json!({"completions": ["only one"]}).to_string())]);
    let p = HttpPolicy::new(&config(Some(&url), None)).unwrap();
    assert!(matches!(p.complete(&view(), "q", 1, 0.0), Err(BackendError::MalformedBody(_))));
    assert!(matches!(p.complete(&view(), "q", 2, 0.0), Err(BackendError::MalformedBody(_))));
    h.join().unwrap();
}

#[test]
fn segmenter_round_trip_and_size_check() {
    let good = json!({"mask": {"width": 64, "height": 32, "counts": [10, 5, 2033]}}).to_string();
    let wrong = json!({"mask": {"width": 32, "height": 32, "counts": [1024]}}).to_string();
    let (url, seen, h) = serve(vec![(200, good), (200, wrong)]);
    let s = HttpSegmenter::new(&config(None, Some(&url))).unwrap();
    let f = Frame::original(64, 32).unwrap();
    let b = BBox::new(1.0, 2.0, 30.0, 20.0, f).unwrap();
    let (p1, p2) = (Point::new(5.0, 6.0, f).unwrap(), Point::new(10.0, 12.0, f).unwrap());
    let m = s.segment(&view(), &b, (&p1, &p2)).unwrap();
    assert_eq!(m.area(), 5);
    assert!(matches!(s.segment(&view(), &b, (&p1, &p2)), Err(BackendError::MalformedMask(_))));
    h.join().unwrap();
    let body = &seen.lock().unwrap()[0].body;
    assert_eq!(body["box"], json!([1.0, 2.0, 30.0, 20.0]));
    assert_eq!(body["points"], json!([[5.0, 6.0], [10.0, 12.0]]));
    assert_eq!(body["point_labels"], json!([1, 1]));
}

#[test]
fn missing_endpoint_is_a_config_error() {
    assert!(matches!(HttpPolicy::new(&BackendsConfig::default()), Err(BackendError::Config(_))));
    assert!(matches!(HttpSegmenter::new(&BackendsConfig::default()), Err(BackendError::Config(_))));
}
