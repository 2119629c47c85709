use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::metrics::whitespace_tokens;
use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliVerdict {
    pub p_entail: f64,
    pub p_neutral: f64,
    pub p_contradict: f64,
}

impl NliVerdict {
    pub fn new(p_entail: f64, p_neutral: f64, p_contradict: f64) -> Result<Self, EvalError> {
        let v = Self { p_entail, p_neutral, p_contradict };
        let ps = [p_entail, p_neutral, p_contradict];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || (ps.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(EvalError::Scorer(format!("invalid NLI probabilities {ps:?}")));
        }
        Ok(v)
    }
}

/// Win iff entailment is the strict argmax. Any tie involving entailment
/// goes against it.
pub fn lang_win(v: &NliVerdict) -> bool {
    v.p_entail > v.p_neutral && v.p_entail > v.p_contradict
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliRequest {
    pub id: String,
    pub premise: String,
    pub hypothesis: String,
}

#[derive(Debug, Deserialize)]
struct NliResponse {
    id: String,
    entail: f64,
    neutral: f64,
    contradict: f64,
}

pub trait NliScorer {
    /// One entry per request, in request order. `None` marks a request the
    /// scorer did not answer validly.
    fn score_batch(&mut self, requests: &[NliRequest]) -> Result<Vec<Option<NliVerdict>>, EvalError>;
}

/// Lexical-overlap stand-in for a real NLI model. With `f` the unigram F1
/// between premise and hypothesis tokens it returns (f², 2f(1−f), (1−f)²).
/// Only meant for tests and smoke runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalBaseline;

impl LexicalBaseline {
    pub fn verdict(premise: &str, hypothesis: &str) -> NliVerdict {
        let p = whitespace_tokens(premise);
        let h = whitespace_tokens(hypothesis);
        let f = super::metrics::rouge(&h, &p, super::metrics::RougeVariant::R1);
        NliVerdict { p_entail: f * f, p_neutral: 2.0 * f * (1.0 - f), p_contradict: (1.0 - f) * (1.0 - f) }
    }
}

impl NliScorer for LexicalBaseline {
    fn score_batch(&mut self, requests: &[NliRequest]) -> Result<Vec<Option<NliVerdict>>, EvalError> {
        Ok(requests.iter().map(|r| Some(Self::verdict(&r.premise, &r.hypothesis))).collect())
    }
}

/// Talks line-delimited JSON with a child process: one request per line on
/// stdin, one response per line on stdout, matched by id in any order. A
/// fresh child is spawned per batch.
#[derive(Debug, Clone)]
pub struct ProcessScorer {
    pub program: String,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl ProcessScorer {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self { program: program.into(), args, timeout: Duration::from_secs(30) }
    }

    /// Splits a shell-style command line on whitespace.
    pub fn from_command_line(cmd: &str) -> Result<Self, EvalError> {
        let mut parts = cmd.split_whitespace().map(String::from);
        let program = parts.next().ok_or_else(|| EvalError::Scorer("empty scorer command".into()))?;
        Ok(Self::new(program, parts.collect()))
    }
}

impl NliScorer for ProcessScorer {
    fn score_batch(&mut self, requests: &[NliRequest]) -> Result<Vec<Option<NliVerdict>>, EvalError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| EvalError::Scorer(format!("cannot start {}: {e}", self.program)))?;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let payload: Vec<String> =
            requests.iter().map(|r| serde_json::to_string(r).expect("request serializes")).collect();
        let writer = thread::spawn(move || {
            for line in payload {
                if writeln!(stdin, "{line}").is_err() {
                    break;
                }
            }
        });

        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });

        let index: HashMap<&str, usize> = requests.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        let mut out = vec![None; requests.len()];
        let mut answered = 0;
        let deadline = Instant::now() + self.timeout;
        let mut timed_out = false;
        while answered < requests.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(left) {
                Ok(line) => {
                    let Ok(resp) = serde_json::from_str::<NliResponse>(&line) else {
                        log::warn!("scorer sent an unparseable line: {line}");
                        continue;
                    };
                    let Some(&i) = index.get(resp.id.as_str()) else {
                        log::warn!("scorer answered unknown id {}", resp.id);
                        continue;
                    };
                    match NliVerdict::new(resp.entail, resp.neutral, resp.contradict) {
                        Ok(v) if out[i].is_none() => {
                            out[i] = Some(v);
                            answered += 1;
                        }
                        Ok(_) => log::warn!("scorer answered id {} twice", resp.id),
                        Err(e) => log::warn!("scorer response for {}: {e}", resp.id),
                    }
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    timed_out = true;
                    break;
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            }
        }
        let _ = child.kill();
        let _ = child.wait();
        let _ = writer.join();
        if timed_out && answered == 0 {
            return Err(EvalError::Scorer(format!("scorer timed out after {:?}", self.timeout)));
        }
        Ok(out)
    }
}
