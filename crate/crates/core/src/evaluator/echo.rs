//! Loopback executor speaking the wire protocol with a planted score. Used
//! as a test fixture for the client and the command-line front end.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::time::Duration;

use serde_json::{json, Value};

#[derive(Clone, Debug)]
pub struct EchoConfig {
    pub primitives: Vec<String>,
    pub score: f64,
    /// Reply to evaluate requests with a line that is not JSON.
    pub malformed: bool,
    /// Exit without replying once this many evaluate requests arrived.
    pub crash_after: Option<u64>,
    pub delay: Duration,
}

impl Default for EchoConfig {
    fn default() -> Self {
        EchoConfig {
            primitives: ["SkImputer", "MissingIndicator", "PCA", "OneHotEncoder", "GaussianNB", "LinearSVC"]
                .map(String::from)
                .to_vec(),
            score: 0.42,
            malformed: false,
            crash_after: None,
            delay: Duration::ZERO,
        }
    }
}

/// What the loop should do after a request line.
pub enum Reply {
    Line(String),
    Exit,
}

pub struct Echo {
    config: EchoConfig,
    known: HashSet<String>,
    evaluated: u64,
}

impl Echo {
    pub fn new(config: EchoConfig) -> Self {
        let known = config.primitives.iter().cloned().collect();
        Echo { config, known, evaluated: 0 }
    }

    pub fn handle(&mut self, line: &str) -> Reply {
        let Ok(req) = serde_json::from_str::<Value>(line) else {
            return Reply::Line(json!({"id": -1, "status": "error", "score": 0.0, "message": "malformed request"}).to_string());
        };
        let id = req.get("id").cloned().unwrap_or(json!(-1));
        match req["op"].as_str() {
            Some("hello") => Reply::Line(
                json!({"op": "hello", "protocol": 1, "primitives": self.config.primitives, "metric_averaging": "macro"}).to_string(),
            ),
            Some("evaluate") => {
                self.evaluated += 1;
                if self.config.crash_after.is_some_and(|n| self.evaluated > n) {
                    return Reply::Exit;
                }
                if !self.config.delay.is_zero() {
                    std::thread::sleep(self.config.delay);
                }
                if self.config.malformed {
                    return Reply::Line("this is not json".into());
                }
                let names: Option<Vec<&str>> = req["pipeline"].as_array().map(|a| a.iter().filter_map(Value::as_str).collect());
                let valid = names.is_some_and(|n| !n.is_empty() && n.iter().all(|t| self.known.contains(*t)));
                let reply = if valid {
                    json!({"id": id, "status": "ok", "score": self.config.score})
                } else {
                    json!({"id": id, "status": "invalid_pipeline", "score": 0.0, "message": "unknown primitive"})
                };
                Reply::Line(reply.to_string())
            }
            _ => Reply::Line(json!({"id": id, "status": "error", "score": 0.0, "message": "unknown op"}).to_string()),
        }
    }
}

/// Serves requests until end of input or a planned crash.
pub fn serve(config: EchoConfig, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    let mut echo = Echo::new(config);
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match echo.handle(&line) {
            Reply::Line(s) => {
                writeln!(output, "{s}")?;
                output.flush()?;
            }
            Reply::Exit => return Ok(()),
        }
    }
    Ok(())
}

/// Parses `--primitives a,b --score x --malformed --crash-after n --delay-ms n`.
pub fn parse_args(args: &[String]) -> Result<EchoConfig, String> {
    let mut c = EchoConfig::default();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let mut value = || it.next().cloned().ok_or_else(|| format!("{flag} needs a value"));
        match flag.as_str() {
            "--primitives" => c.primitives = value()?.split(',').map(String::from).collect(),
            "--score" => c.score = value()?.parse().map_err(|e| format!("--score: {e}"))?,
            "--malformed" => c.malformed = true,
            "--crash-after" => c.crash_after = Some(value()?.parse().map_err(|e| format!("--crash-after: {e}"))?),
            "--delay-ms" => c.delay = Duration::from_millis(value()?.parse().map_err(|e| format!("--delay-ms: {e}"))?),
            other => return Err(format!("unknown flag {other}")),
        }
    }
    Ok(c)
}
