//! Line-delimited JSON query protocol over byte streams.
//!
//! Each request is one line `{"shape": [n, h, w, c], "data": [...]}`; each
//! response is one line `{"shape": [n, classes], "probs": [...]}` or
//! `{"error": "..."}`. The server answers requests until end of input.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{DivaError, Result};
use crate::nn::model::Classifier;
use crate::surrogate::{QueryOracle, Teacher};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Request {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Response {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn answer(oracle: &QueryOracle<'_>, line: &str) -> Response {
    let result = serde_json::from_str::<Request>(line)
        .map_err(DivaError::from)
        .and_then(|r| Tensor::new(r.shape, r.data))
        .and_then(|x| oracle.query(&x));
    match result {
        Ok(p) => Response {
            shape: Some(p.shape().to_vec()),
            probs: Some(p.into_data()),
            error: None,
        },
        Err(e) => Response {
            shape: None,
            probs: None,
            error: Some(e.to_string()),
        },
    }
}

/// Serves probability queries for `net`; returns the number of requests.
///
/// Malformed requests get an error response and do not end the session.
pub fn serve_queries<R: BufRead, W: Write>(net: &dyn Classifier, reader: R, mut writer: W) -> Result<usize> {
    let oracle = QueryOracle::new(net);
    let mut served = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = answer(&oracle, &line);
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        served += 1;
    }
    Ok(served)
}

/// A teacher on the far side of a request/response stream pair.
pub struct StreamTeacher<R, W> {
    io: Mutex<(R, W)>,
}

impl<R: BufRead + Send, W: Write + Send> StreamTeacher<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        StreamTeacher {
            io: Mutex::new((reader, writer)),
        }
    }
}

impl<R: BufRead + Send, W: Write + Send> Teacher for StreamTeacher<R, W> {
    fn query(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut guard = self.io.lock().map_err(|_| DivaError::Data("teacher stream poisoned".into()))?;
        let (reader, writer) = &mut *guard;
        let req = Request {
            shape: inputs.shape().to_vec(),
            data: inputs.data().to_vec(),
        };
        serde_json::to_writer(&mut *writer, &req)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(DivaError::Data("teacher closed the stream".into()));
        }
        let resp: Response = serde_json::from_str(&line)
            .map_err(|e| DivaError::Data(format!("malformed teacher response: {e}")))?;
        if let Some(err) = resp.error {
            return Err(DivaError::Data(format!("teacher error: {err}")));
        }
        match (resp.shape, resp.probs) {
            (Some(shape), Some(probs)) => Tensor::new(shape, probs)
                .map_err(|e| DivaError::Data(format!("malformed teacher response: {e}"))),
            _ => Err(DivaError::Data("teacher response lacks probabilities".into())),
        }
    }
}

/// A teacher served by a child process speaking the query protocol.
pub struct ChildTeacher {
    child: Child,
    stream: StreamTeacher<BufReader<ChildStdout>, ChildStdin>,
}

impl Teacher for ChildTeacher {
    fn query(&self, inputs: &Tensor) -> Result<Tensor> {
        self.stream.query(inputs)
    }
}

impl Drop for ChildTeacher {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Spawns `command` with piped stdio as a query teacher.
pub fn spawn_teacher(mut command: Command) -> Result<ChildTeacher> {
    let mut child = command.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    Ok(ChildTeacher {
        child,
        stream: StreamTeacher::new(BufReader::new(stdout), stdin),
    })
}
