//! Gateway client against an in-process HTTP stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use serde_json::{json, Value};
use sgic::embedding::{Embedder, ToyEmbedder};
use sgic::gateway::{
    connect, decode_mask_png, describer, embedder_or_toy, encode_mask_png, segmenter_or_similarity, GatewayClient,
    GatewayError,
};
use sgic::image::RasterImage;
use sgic::semantics::SemanticItem;

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Healthy,
    NoModels,
    BadNorm,
    WrongDim,
    WrongMaskSize,
    Failing,
}

const D: usize = 8;

fn unit_vector(seed: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..D).map(|i| ((i + seed) % 5) as f64 + 1.0).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn respond(mode: Mode, route: &str, body: &Value) -> (u16, Value) {
    if mode == Mode::Failing && route != "/v1/handshake" {
        return (503, json!({"error": "model failed to load"}));
    }
    match route {
        "/v1/handshake" => {
            let name = |s: &str| if mode == Mode::NoModels { Value::Null } else { json!(s) };
            (200, json!({"d": D, "models": {"embedder": name("stub-clip"), "segmenter": name("stub-seg"), "describer": name("stub-vlm")}}))
        }
        "/v1/embed" => {
            let payload = body["payload"].as_str().unwrap_or("");
            if payload.is_empty() {
                return (400, json!({"error": "empty payload"}));
            }
            let mut v = unit_vector(payload.len());
            if mode == Mode::BadNorm {
                v[0] += 0.5;
            }
            if mode == Mode::WrongDim {
                v.push(0.0);
            }
            (200, json!({"vector": v, "model": "stub-clip"}))
        }
        "/v1/segment" => {
            let png = body["image"].as_str().unwrap();
            let bytes = base64::Engine::decode(&base64::engine::general_purpose::STANDARD, png).unwrap();
            let img = image::load_from_memory(&bytes).unwrap();
            let (mut w, h) = (img.width() as usize, img.height() as usize);
            if mode == Mode::WrongMaskSize {
                w += 1;
            }
            // left half on
            let data: Vec<f64> = (0..w * h).map(|i| if i % w < w / 2 { 1.0 } else { 0.0 }).collect();
            (200, json!({"mask": encode_mask_png(w, h, &data).unwrap(), "model": "stub-seg"}))
        }
        "/v1/describe" => (
            200,
            json!({"items": [{"name": "mountain", "detail": "snowy peak"}], "overall": "a mountain under a clear sky", "truncated": false, "model": "stub-vlm"}),
        ),
        _ => (404, json!({"error": "no route"})),
    }
}

/// Serves until the process exits; returns the base URL and a request
/// counter.
fn serve(mode: Mode) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            counter.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let route = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut len = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                if let Some((k, v)) = h.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let parsed: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let (status, reply) = respond(mode, &route, &parsed);
            let text = reply.to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
        }
    });
    (url, hits)
}

fn photo() -> RasterImage {
    RasterImage::from_fn(32, 24, |x, y| [x as f64 / 32.0, y as f64 / 24.0, 0.5])
}

#[test]
fn handshake_is_idempotent_and_declares_models() {
    let (url, _) = serve(Mode::Healthy);
    let c = GatewayClient::new(&url);
    let a = c.handshake().unwrap();
    assert_eq!(a, c.handshake().unwrap());
    assert_eq!(a.d, D);
    assert_eq!(a.models.embedder.as_deref(), Some("stub-clip"));
}

#[test]
fn embeddings_have_declared_dim_and_unit_norm() {
    let (url, _) = serve(Mode::Healthy);
    let p = connect(&GatewayClient::new(&url)).unwrap();
    let e = embedder_or_toy(&p);
    assert_eq!(e.dim(), D);
    assert_eq!(e.model_id(), "stub-clip");
    let a = e.embed_text("a photo of a mountain").unwrap();
    assert_eq!(a, e.embed_text("a photo of a mountain").unwrap());
    assert!((a.norm() - 1.0).abs() < 1e-5);
    let i = e.embed_image(&photo()).unwrap();
    assert_eq!(i.dim(), D);
}

#[test]
fn schema_violations_are_rejected() {
    for mode in [Mode::BadNorm, Mode::WrongDim] {
        let (url, _) = serve(mode);
        let c = GatewayClient::new(&url);
        assert!(matches!(c.embed_text("sky", D), Err(GatewayError::Schema(_))));
    }
    let (url, _) = serve(Mode::WrongMaskSize);
    let c = GatewayClient::new(&url);
    assert!(matches!(c.segment(&photo(), "mountain"), Err(GatewayError::Schema(_))));
}

#[test]
fn http_errors_surface_status() {
    let (url, _) = serve(Mode::Failing);
    let c = GatewayClient::new(&url);
    match c.embed_text("sky", D) {
        Err(GatewayError::Http { status, .. }) => assert_eq!(status, 503),
        other => panic!("{other:?}"),
    }
    let p = connect(&c).unwrap();
    assert!(describer(&p).unwrap().describe(&photo()).is_err());
}

#[test]
fn segment_mask_matches_request_and_is_upsampled() {
    let (url, _) = serve(Mode::Healthy);
    let c = GatewayClient::new(&url);
    let img = photo();
    let raw = c.segment(&img, "mountain").unwrap();
    assert_eq!(raw.len(), img.pixel_count());
    assert!(raw.iter().all(|v| (0.0..=1.0).contains(v)));
    let p = connect(&c).unwrap();
    let seg = segmenter_or_similarity(&p, Arc::new(ToyEmbedder));
    let m = seg.segment(&img, 0, &SemanticItem::new("mountain", "")).unwrap();
    assert_eq!((m.width, m.height), (64, 48));
    assert!(m.get(2, 10) > 0.9 && m.get(60, 10) < 0.1);
}

#[test]
fn describe_validates() {
    let (url, _) = serve(Mode::Healthy);
    let p = connect(&GatewayClient::new(&url)).unwrap();
    let d = describer(&p).unwrap().describe(&photo()).unwrap();
    assert_eq!(d.items[0].name, "mountain");
}

#[test]
fn missing_models_fall_back_to_local_providers() {
    let (url, hits) = serve(Mode::NoModels);
    let p = connect(&GatewayClient::new(&url)).unwrap();
    assert!(p.embedder.is_none());
    let e = embedder_or_toy(&p);
    assert_eq!(e.dim(), ToyEmbedder.dim());
    assert_eq!(e.embed_text("sky").unwrap(), ToyEmbedder.embed_text("sky").unwrap());
    let seg = segmenter_or_similarity(&p, e.clone());
    let m = seg.segment(&photo(), 0, &SemanticItem::new("sky", "")).unwrap();
    assert_eq!((m.width, m.height), (64, 48));
    assert!(matches!(describer(&p), Err(GatewayError::Unavailable("describer"))));
    // only the handshake reached the server
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn unreachable_gateway_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    assert!(matches!(GatewayClient::new(&url).handshake(), Err(GatewayError::Transport(_))));
}

#[test]
fn mask_png_round_trip() {
    let data: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
    let (w, h, back) = decode_mask_png(&encode_mask_png(4, 3, &data).unwrap()).unwrap();
    assert_eq!((w, h), (4, 3));
    for (a, b) in data.iter().zip(&back) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
}
