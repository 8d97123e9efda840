//! Aggregates finished run directories into a markdown summary and a long
//! CSV (`run,seed,section,metric,value`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use awenc_core::config::ExperimentConfig;
use awenc_core::pipeline::Thresholds;
use awenc_core::verification::VerificationReport;
use awenc_core::watermark::Watermark;
use awenc_core::Error;

use crate::run_dir as rd;
use crate::Outcome;

const REQUIRED: [&str; 6] = [
    rd::CONFIG,
    rd::PRETRAIN_HISTORY,
    rd::WATERMARK,
    rd::PGD_TRAJECTORY,
    rd::EMBED_HISTORY,
    rd::EFFECTIVENESS,
];

pub const SUMMARY_CSV_HEADER: &str = "run,seed,section,metric,value";

/// Rows of a CSV file with a header, as strings.
fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Invalid(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

fn column(header: &[String], rows: &[Vec<String>], name: &str, path: &Path) -> Result<Vec<f64>> {
    let i = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Invalid(format!("{} has no column {name}", path.display())))?;
    rows.iter()
        .map(|r| {
            r.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Invalid(format!("{}: bad value in column {name}", path.display())).into())
        })
        .collect()
}

struct Summary {
    md: String,
    csv: String,
}

impl Summary {
    fn metric(&mut self, run: &str, seed: u64, section: &str, metric: &str, value: f64) {
        let _ = writeln!(self.csv, "{run},{seed},{section},{metric},{value:e}");
    }
}

fn first_last(v: &[f64]) -> (f64, f64) {
    (
        v.first().copied().unwrap_or(f64::NAN),
        v.last().copied().unwrap_or(f64::NAN),
    )
}

fn summarise(dir: &Path, s: &mut Summary) -> Result<()> {
    let run = dir.display().to_string();
    let cfg = ExperimentConfig::load(&dir.join(rd::CONFIG))?;
    let seed = cfg.seed;
    let _ = writeln!(s.md, "## Run `{run}`\n");
    let _ = writeln!(
        s.md,
        "Seed {seed}, {} pretraining, configuration SHA-256 `{}`.\n",
        cfg.contrastive.algorithm.name(),
        cfg.content_hash()
    );

    let p = dir.join(rd::PRETRAIN_HISTORY);
    let (h, rows) = read_csv(&p)?;
    let (l0, l1) = first_last(&column(&h, &rows, "mean_loss", &p)?);
    let _ = writeln!(
        s.md,
        "### Phase I: pretraining\n\n{} epochs, mean loss {l0:.4} -> {l1:.4}.\n",
        rows.len()
    );
    s.metric(&run, seed, "pretrain", "first_loss", l0);
    s.metric(&run, seed, "pretrain", "last_loss", l1);

    let w = Watermark::load(&dir.join(rd::WATERMARK))?;
    let p = dir.join(rd::PGD_TRAJECTORY);
    let (h, rows) = read_csv(&p)?;
    let (a0, a1) = first_last(&column(&h, &rows, "loss", &p)?);
    let _ = writeln!(
        s.md,
        "### Phase II: watermark generation\n\nε = {:.4} ({:.1}/255), {} PGD steps, adversarial loss {a0:.4} -> {a1:.4}, \
         mean cosine similarity to the key embedding {:.4}. Watermark SHA-256 `{}`.\n",
        w.epsilon,
        w.epsilon * 255.0,
        w.pgd.steps,
        w.pgd.final_mean_similarity,
        w.fingerprint()
    );
    s.metric(&run, seed, "generate", "epsilon", w.epsilon);
    s.metric(&run, seed, "generate", "initial_loss", a0);
    s.metric(&run, seed, "generate", "final_loss", a1);
    s.metric(&run, seed, "generate", "final_similarity", w.pgd.final_mean_similarity);

    let p = dir.join(rd::EMBED_HISTORY);
    let (h, rows) = read_csv(&p)?;
    let (c0, c1) = first_last(&column(&h, &rows, "mean_contrastive", &p)?);
    let (w0, w1) = first_last(&column(&h, &rows, "mean_watermark", &p)?);
    let _ = writeln!(
        s.md,
        "### Phase III: embedding\n\n{} epochs, contrastive loss {c0:.4} -> {c1:.4}, watermark loss {w0:.4e} -> {w1:.4e}.\n",
        rows.len()
    );
    s.metric(&run, seed, "embed", "last_contrastive", c1);
    s.metric(&run, seed, "embed", "last_watermark", w1);

    let p = dir.join(rd::EFFECTIVENESS);
    let (h, rows) = read_csv(&p)?;
    let ce = column(&h, &rows, "ce", &p)?;
    let we = column(&h, &rows, "we", &p)?;
    let _ = writeln!(s.md, "### Verification\n\n| metric | CE | WE | abs gap |\n|---|---|---|---|");
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(s.md, "| {} | {:.4e} | {:.4e} | {:.4e} |", r[0], ce[i], we[i], (ce[i] - we[i]).abs());
        s.metric(&run, seed, "verify", &format!("{}_ce", r[0]), ce[i]);
        s.metric(&run, seed, "verify", &format!("{}_we", r[0]), we[i]);
    }
    s.md.push('\n');
    if let Ok(text) = std::fs::read_to_string(dir.join(rd::THRESHOLDS)) {
        let t = Thresholds::from_json(&text)?;
        let _ = writeln!(s.md, "Calibrated thresholds: t_s = {:.4e}, t_c = {:.4e}.\n", t.t_s, t.t_c);
        s.metric(&run, seed, "verify", "t_s", t.t_s);
        s.metric(&run, seed, "verify", "t_c", t.t_c);
    }
    for name in ["verify_white.json", "verify_black.json"] {
        if let Ok(text) = std::fs::read_to_string(dir.join(name)) {
            let r = VerificationReport::from_json(&text)?;
            let _ = writeln!(s.md, "- `{name}`: {}", r.summary_line());
        }
    }

    let p = dir.join(rd::ATTACKS);
    if p.exists() {
        let (h, rows) = read_csv(&p)?;
        let _ = writeln!(s.md, "\n### Attacks\n\n| {} |\n|{}", h.join(" | "), "---|".repeat(h.len()));
        for r in &rows {
            let _ = writeln!(s.md, "| {} |", r.join(" | "));
        }
        let t_sim_we = column(&h, &rows, "t_sim_we", &p)?;
        let gap = column(&h, &rows, "t_cls_gap", &p)?;
        for (i, r) in rows.iter().enumerate() {
            let label = if r[1].is_empty() { r[0].clone() } else { format!("{}_{}", r[0], r[1]) };
            s.metric(&run, seed, "attack", &format!("{label}_t_sim_we"), t_sim_we[i]);
            s.metric(&run, seed, "attack", &format!("{label}_t_cls_gap"), gap[i]);
        }
    }
    s.md.push('\n');
    Ok(())
}

pub fn report(runs: &[PathBuf], out: Option<PathBuf>) -> Result<Outcome> {
    let mut missing = Vec::new();
    for dir in runs {
        for name in REQUIRED {
            if !dir.join(name).is_file() {
                missing.push(dir.join(name).display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Invalid(format!("incomplete run, missing: {}", missing.join(", "))).into());
    }
    let mut s = Summary {
        md: format!("# Watermarking runs\n\n{} run(s).\n\n", runs.len()),
        csv: format!("{SUMMARY_CSV_HEADER}\n"),
    };
    for dir in runs {
        summarise(dir, &mut s)?;
    }
    let out = out.unwrap_or_else(|| runs[0].clone());
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join(rd::SUMMARY_MD), &s.md)?;
    std::fs::write(out.join(rd::SUMMARY_CSV), &s.csv)?;
    println!("wrote {} and {}", out.join(rd::SUMMARY_MD).display(), out.join(rd::SUMMARY_CSV).display());
    Ok(Outcome::Done)
}
