#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Path of a shared fixture; works from either crate's test targets.
pub fn fixture(name: &str) -> PathBuf {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let local = manifest.join("tests/fixtures");
    let dir = if local.is_dir() {
        local
    } else {
        manifest.join("../core/tests/fixtures")
    };
    dir.join(name)
}

/// The fifteen sample records, as (headline, date, author).
pub fn sample_records() -> Vec<(String, String, String)> {
    let text = std::fs::read_to_string(fixture("sample.jsonl")).unwrap();
    text.lines()
        .map(|line| {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            (
                v["headline"].as_str().unwrap().to_owned(),
                v["date"].as_str().unwrap().to_owned(),
                v["authors"].as_str().unwrap().to_owned(),
            )
        })
        .collect()
}

const SUBJECTS: &[&str] = &[
    "Governor", "Senate Panel", "House Speaker", "City Council", "Mayor", "State Lawmakers",
    "Attorney General", "Election Board", "Treasury Secretary", "Parliament", "Prime Minister",
    "County Officials", "Party Leaders", "Union Chiefs", "Federal Regulators", "Trade Envoy",
];
const VERBS: &[&str] = &[
    "Unveils", "Rejects", "Debates", "Delays", "Approves", "Criticizes", "Expands", "Cuts",
    "Investigates", "Defends", "Revises", "Announces",
];
const OBJECTS: &[&str] = &[
    "Budget Plan", "Housing Reform", "Tax Overhaul", "Infrastructure Package", "Pension Rules",
    "Transit Funding", "Water Policy", "Farm Subsidies", "Energy Tariffs", "Zoning Changes",
    "Broadband Grants", "Tariff Schedule", "Minimum Wage Proposal", "Voting Map",
];
const PLACES: &[&str] = &[
    "in Ohio", "in Nevada", "in Oregon", "in Georgia", "in Maine", "in Arizona", "in Iowa",
    "in Vermont", "After Heated Session", "Ahead of Recess", "Amid Budget Standoff",
];

/// Deterministic political headlines sharing no topic with the sample records.
pub fn distractor_headlines(count: usize, seed: u64) -> Vec<String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out: Vec<String> = Vec::with_capacity(count);
    while out.len() < count {
        let headline = format!(
            "{} {} {} {}",
            SUBJECTS[rng.random_range(0..SUBJECTS.len())],
            VERBS[rng.random_range(0..VERBS.len())],
            OBJECTS[rng.random_range(0..OBJECTS.len())],
            PLACES[rng.random_range(0..PLACES.len())],
        );
        if !out.contains(&headline) {
            out.push(headline);
        }
    }
    out
}

/// JSON line in the news-dataset shape.
pub fn news_line(headline: &str, date: &str, author: &str) -> String {
    serde_json::json!({
        "link": "",
        "headline": headline,
        "category": "POLITICS",
        "short_description": "",
        "authors": author,
        "date": date,
    })
    .to_string()
}

/// Random unit vector with components drawn uniformly from [-1, 1).
pub fn random_unit(rng: &mut StdRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[derive(Debug, Clone)]
pub struct StubResponse {
    pub status: u16,
    pub body: String,
    pub delay: Option<Duration>,
}

impl StubResponse {
    pub fn json(status: u16, body: impl Into<String>) -> Self {
        Self {
            status,
            body: body.into(),
            delay: None,
        }
    }

    pub fn delayed(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }
}

#[derive(Debug, Clone)]
pub struct CapturedRequest {
    pub request_line: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl CapturedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.body).unwrap()
    }
}

/// Single-threaded HTTP/1.1 server answering with a fixed script of
/// responses (the last one repeats once the script is exhausted).
pub struct StubServer {
    pub url: String,
    captured: Arc<Mutex<Vec<CapturedRequest>>>,
}

impl StubServer {
    pub fn start(script: Vec<StubResponse>) -> StubServer {
        assert!(!script.is_empty());
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let captured = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&captured);
        thread::spawn(move || {
            for (served, stream) in listener.incoming().enumerate() {
                let Ok(stream) = stream else { continue };
                let response = script[served.min(script.len() - 1)].clone();
                if let Some(request) = handle(stream, &response) {
                    log.lock().unwrap().push(request);
                }
            }
        });
        StubServer { url, captured }
    }

    pub fn requests(&self) -> Vec<CapturedRequest> {
        self.captured.lock().unwrap().clone()
    }
}

fn handle(mut stream: TcpStream, response: &StubResponse) -> Option<CapturedRequest> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line).ok()?;
    let mut headers = Vec::new();
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            headers.push((k.trim().to_owned(), v.trim().to_owned()));
        }
    }
    let length = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.parse::<usize>().ok())
        .unwrap_or(0);
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).ok()?;
    let captured = CapturedRequest {
        request_line: request_line.trim_end().to_owned(),
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    };
    if let Some(delay) = response.delay {
        thread::sleep(delay);
    }
    let reply = format!(
        "HTTP/1.1 {} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        response.status,
        response.body.len(),
        response.body
    );
    let _ = stream.write_all(reply.as_bytes());
    let _ = stream.flush();
    Some(captured)
}
