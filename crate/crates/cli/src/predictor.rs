//! Black-box access to an external classifier over a line protocol.
//!
//! The verifier starts the command once and writes one image per line to its
//! standard input: the pixel values in `[0, 1]`, whitespace separated, in
//! `H·W·C` row-major order. The command answers with one integer label per
//! line on standard output, in the same order.

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::thread;

use awenc_core::numcore::Tensor;
use awenc_core::verification::LabelOracle;
use awenc_core::Error;

pub struct SubprocessOracle {
    program: String,
    args: Vec<String>,
}

impl SubprocessOracle {
    /// `command` is split on whitespace into a program and its arguments.
    pub fn new(command: &str) -> anyhow::Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| anyhow::anyhow!("empty predictor command"))?;
        Ok(Self {
            program,
            args: parts.collect(),
        })
    }
}

pub fn encode_line(pixels: &[f64]) -> String {
    let mut s = String::with_capacity(pixels.len() * 20);
    for (i, p) in pixels.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&p.to_string());
    }
    s
}

pub fn decode_line(line: &str, expected: usize) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("bad pixel {t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != expected {
        return Err(format!("expected {expected} pixels, got {}", v.len()));
    }
    Ok(v)
}

impl LabelOracle for SubprocessOracle {
    fn predict(&mut self, images: &Tensor) -> awenc_core::Result<Vec<usize>> {
        let oracle_err = |m: String| Error::Oracle(format!("{}: {m}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| oracle_err(format!("cannot start: {e}")))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let lines: Vec<String> = (0..images.rows()).map(|i| encode_line(images.row(i))).collect();
        // Feed from another thread so a predictor that answers as it reads
        // cannot deadlock against a full pipe.
        let writer = thread::spawn(move || -> std::io::Result<()> {
            for l in lines {
                writeln!(stdin, "{l}")?;
            }
            Ok(())
        });
        let stdout = child.stdout.take().expect("piped stdout");
        let mut labels = Vec::with_capacity(images.rows());
        for line in BufReader::new(stdout).lines() {
            let line = line.map_err(|e| oracle_err(e.to_string()))?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            labels.push(
                t.parse::<usize>()
                    .map_err(|_| oracle_err(format!("answered {t:?}, expected a label")))?,
            );
        }
        let wrote = writer.join().expect("writer thread");
        let status = child.wait().map_err(|e| oracle_err(e.to_string()))?;
        if !status.success() {
            return Err(oracle_err(format!("exited with {status}")));
        }
        wrote.map_err(|e| oracle_err(format!("writing queries: {e}")))?;
        if labels.len() != images.rows() {
            return Err(oracle_err(format!(
                "returned {} labels for {} images",
                labels.len(),
                images.rows()
            )));
        }
        Ok(labels)
    }
}
