use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use awenc_core::attacks::attack_report;
use awenc_core::config::ExperimentConfig;
use awenc_core::contrastive::ContrastiveModel;
use awenc_core::data::{Dataset, Role};
use awenc_core::models::{DownstreamModel, EncoderModel, LinearProbe, ProjectionHead};
use awenc_core::numcore::Tensor;
use awenc_core::pipeline::{self, Thresholds};
use awenc_core::verification::{t_cls, t_sim, verify as decide, LabelOracle, Mode, Subject};
use awenc_core::watermark::Watermark;
use awenc_core::Error;

use crate::predictor::{decode_line, SubprocessOracle};
use crate::run_dir::{self as rd, RunDir};
use crate::{Common, ModeArg, Outcome};

struct Loaded {
    cfg: ExperimentConfig,
    config_path: Option<PathBuf>,
    run: RunDir,
}

fn load(common: &Common) -> Result<Loaded> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let root = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    Ok(Loaded {
        cfg,
        config_path: common.config.clone(),
        run: RunDir::create(&root)?,
    })
}

impl Loaded {
    fn inputs<'a>(&'a self, extra: &[&'a Path]) -> Vec<&'a Path> {
        self.config_path
            .as_deref()
            .into_iter()
            .chain(extra.iter().copied())
            .collect()
    }

    fn metadata(&self, command: &str, inputs: &[&Path], outputs: &[PathBuf]) -> Result<()> {
        self.run.write_metadata(
            command,
            self.cfg.seed,
            self.cfg.content_hash(),
            &self.inputs(inputs),
            outputs,
        )
    }

    fn dataset(&self) -> Result<Dataset> {
        Ok(pipeline::dataset(&self.cfg)?)
    }

    fn or_run(&self, given: Option<PathBuf>, name: &str) -> PathBuf {
        given.unwrap_or_else(|| self.run.path(name))
    }

    /// Threshold precedence: command line, configuration, calibrated file.
    fn threshold(&self, given: Option<f64>, mode: Mode) -> Result<f64> {
        if let Some(t) = given {
            return Ok(t);
        }
        let from_cfg = match mode {
            Mode::WhiteBox => self.cfg.verify.t_s,
            Mode::BlackBox => self.cfg.verify.t_c,
        };
        if let Some(t) = from_cfg {
            return Ok(t);
        }
        let p = self.run.path(rd::THRESHOLDS);
        let text = std::fs::read_to_string(&p).map_err(|_| {
            Error::Invalid(format!(
                "no threshold given and no calibrated thresholds at {}; pass --threshold or run `awenc watermark` first",
                p.display()
            ))
        })?;
        let t = Thresholds::from_json(&text)?;
        Ok(match mode {
            Mode::WhiteBox => t.t_s,
            Mode::BlackBox => t.t_c,
        })
    }
}

fn check_fits(w: &Watermark, ds: &Dataset) -> Result<()> {
    if w.shape != ds.shape {
        return Err(Error::Invalid(format!(
            "watermark is for {:?} images but the configured data is {:?}",
            w.shape, ds.shape
        ))
        .into());
    }
    Ok(())
}

pub fn pretrain(common: &Common) -> Result<Outcome> {
    let l = load(common)?;
    let ds = l.dataset()?;
    let (model, history) = pipeline::run_pretrain(&l.cfg, &ds)?;
    let outputs = vec![
        l.run.write(rd::CONFIG, l.cfg.to_toml())?,
        l.run.write(rd::ENCODER, model.encoder.to_bytes())?,
        l.run.write(rd::HEAD, model.head.to_bytes())?,
    ];
    l.run.write(rd::PRETRAIN_HISTORY, history.to_csv())?;
    l.metadata("pretrain", &[], &outputs)?;
    println!(
        "pretrained {} for {} epochs: loss {:.4} -> {:.4}; encoder {}",
        l.cfg.contrastive.algorithm.name(),
        history.records.len(),
        history.first_loss().unwrap_or(f64::NAN),
        history.last_loss().unwrap_or(f64::NAN),
        l.run.path(rd::ENCODER).display()
    );
    Ok(Outcome::Done)
}

fn effectiveness_csv(rows: &[(&str, f64, f64)]) -> String {
    let mut s = String::from("metric,ce,we,abs_gap\n");
    for (m, ce, we) in rows {
        s.push_str(&format!("{m},{ce:e},{we:e},{:e}\n", (ce - we).abs()));
    }
    s
}

pub fn watermark(common: &Common, checkpoint: Option<PathBuf>) -> Result<Outcome> {
    let l = load(common)?;
    let ds = l.dataset()?;
    let enc_path = l.or_run(checkpoint, rd::ENCODER);
    let head_path = enc_path.with_file_name(rd::HEAD);
    let model = ContrastiveModel {
        encoder: EncoderModel::load(&enc_path)?,
        head: ProjectionHead::load(&head_path)?,
    };
    if l.cfg.watermark.epsilon_unit() == 0.0 {
        eprintln!("warning: epsilon is 0, the watermark will be all zeros and proves nothing");
    }
    let marked = pipeline::run_watermark(&l.cfg, &ds, &model)?;
    let w = &marked.watermark;
    let mut outputs = vec![
        l.run.write(rd::CONFIG, l.cfg.to_toml())?,
        l.run.write(rd::WATERMARK, w.to_bytes())?,
        l.run.write(rd::MARKED_ENCODER, marked.model.encoder.to_bytes())?,
        l.run.write(rd::MARKED_HEAD, marked.model.head.to_bytes())?,
    ];
    let mut traj = String::from("step,loss\n");
    for (i, v) in marked.trajectory.iter().enumerate() {
        traj.push_str(&format!("{i},{v:e}\n"));
    }
    outputs.push(l.run.write(rd::PGD_TRAJECTORY, traj)?);
    l.run.write(rd::EMBED_HISTORY, marked.history.to_combined_csv())?;

    let ce = pipeline::downstream_model(&l.cfg, &ds, &model.encoder)?;
    let we = pipeline::downstream_model(&l.cfg, &ds, &marked.model.encoder)?;
    outputs.push(l.run.write(rd::PROBE_CLEAN, ce.probe.to_bytes())?);
    outputs.push(l.run.write(rd::PROBE_MARKED, we.probe.to_bytes())?);

    let test = pipeline::downstream_test(&l.cfg, &ds);
    let ver = pipeline::verify_images(&l.cfg, &ds);
    let score = |m: &DownstreamModel| -> Result<(f64, f64, f64)> {
        let mut o = m.clone();
        Ok((
            m.accuracy(&test)?,
            t_cls(&mut o, &test.images, w)?,
            t_sim(&m.encoder, &ver, w)?,
        ))
    };
    let (a0, c0, s0) = score(&ce)?;
    let (a1, c1, s1) = score(&we)?;
    outputs.push(l.run.write(
        rd::EFFECTIVENESS,
        effectiveness_csv(&[("accuracy", a0, a1), ("t_cls", c0, c1), ("t_sim", s0, s1)]),
    )?);
    match pipeline::calibrate(&l.cfg, &ds, &ce, &we, w) {
        Ok(t) => {
            outputs.push(l.run.write(rd::THRESHOLDS, t.to_json() + "\n")?);
            println!("calibrated thresholds: t_s = {:.6e}, t_c = {:.6e}", t.t_s, t.t_c);
        }
        Err(e @ Error::Overlap { .. }) => {
            eprintln!("warning: {e}; no thresholds written");
        }
        Err(e) => return Err(e.into()),
    }
    l.metadata("watermark", &[&enc_path, &head_path], &outputs)?;
    println!(
        "watermark {}: PGD similarity {:.4}; T_sim CE {:.4e} WE {:.4e}; T_cls CE {:.3} WE {:.3}; accuracy CE {:.3} WE {:.3}",
        &w.fingerprint()[..16],
        w.pgd.final_mean_similarity,
        s0,
        s1,
        c0,
        c1,
        a0,
        a1
    );
    Ok(Outcome::Done)
}

pub struct VerifyInputs {
    pub checkpoint: Option<PathBuf>,
    pub watermark: Option<PathBuf>,
    pub probe: Option<PathBuf>,
    pub predictor: Option<String>,
    pub threshold: Option<f64>,
}

pub fn verify(common: &Common, mode: ModeArg, v: VerifyInputs) -> Result<Outcome> {
    let l = load(common)?;
    let ds = l.dataset()?;
    let w_path = l.or_run(v.watermark, rd::WATERMARK);
    let w = Watermark::load(&w_path)?;
    check_fits(&w, &ds)?;
    let mut inputs: Vec<PathBuf> = vec![w_path.clone()];
    let (mode, score, subject, count) = match mode {
        ModeArg::White => {
            if v.probe.is_some() || v.predictor.is_some() {
                bail!(Error::Invalid("white-box verification takes an encoder checkpoint, not a probe or predictor".into()));
            }
            let Some(p) = v.checkpoint else {
                bail!(Error::Invalid("white-box verification needs --checkpoint".into()));
            };
            let enc = EncoderModel::load(&p)?;
            let ver = pipeline::verify_images(&l.cfg, &ds);
            inputs.push(p);
            (Mode::WhiteBox, t_sim(&enc, &ver, &w)?, enc.fingerprint(), ver.rows())
        }
        ModeArg::Black => {
            let test = pipeline::downstream_test(&l.cfg, &ds);
            let (mut oracle, id): (Box<dyn LabelOracle>, String) = match (v.predictor, v.probe) {
                (Some(cmd), _) => (Box::new(SubprocessOracle::new(&cmd)?), format!("predictor: {cmd}")),
                (None, Some(probe)) => {
                    let Some(p) = v.checkpoint else {
                        bail!(Error::Invalid("--probe needs the encoder it sits on via --checkpoint".into()));
                    };
                    let m = DownstreamModel {
                        encoder: EncoderModel::load(&p)?,
                        probe: LinearProbe::load(&probe)?,
                    };
                    let id = format!("{}+{}", m.encoder.fingerprint(), m.probe.fingerprint());
                    inputs.extend([p, probe]);
                    (Box::new(m), id)
                }
                (None, None) => bail!(Error::Invalid(
                    "black-box verification needs --predictor or --checkpoint with --probe".into()
                )),
            };
            (Mode::BlackBox, t_cls(oracle.as_mut(), &test.images, &w)?, id, test.len())
        }
    };
    let threshold = l.threshold(v.threshold, mode)?;
    let report = decide(
        mode,
        score,
        threshold,
        Subject {
            id: &subject,
            sample_count: count,
        },
        &w,
    )?;
    let name = match mode {
        Mode::WhiteBox => "verify_white",
        Mode::BlackBox => "verify_black",
    };
    let out = l.run.write(&format!("{name}.json"), report.to_json() + "\n")?;
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    l.metadata(name, &input_refs, &[out])?;
    println!("{}", report.summary_line());
    Ok(Outcome::Verdict(report.verdict))
}

pub fn attack(
    common: &Common,
    checkpoint: Option<PathBuf>,
    clean: Option<PathBuf>,
    watermark: Option<PathBuf>,
) -> Result<Outcome> {
    let l = load(common)?;
    let ds = l.dataset()?;
    let marked_path = l.or_run(checkpoint, rd::MARKED_ENCODER);
    let clean_path = l.or_run(clean, rd::ENCODER);
    let w_path = l.or_run(watermark, rd::WATERMARK);
    let marked = EncoderModel::load(&marked_path)?;
    let clean = EncoderModel::load(&clean_path)?;
    let w = Watermark::load(&w_path)?;
    check_fits(&w, &ds)?;
    let t_s = l.threshold(None, Mode::WhiteBox)?;
    let pre = ds.subset(Role::Pretrain).images;
    let train = ds.subset(Role::DownstreamTrain);
    let head_arch = l.cfg.model.head_arch();
    let ctx = pipeline::attack_context(&l.cfg, &ds, &pre, &train, &head_arch);
    let report = attack_report(
        &clean,
        &marked,
        &w,
        &l.cfg.attacks,
        &ctx,
        &l.cfg.probe,
        &pipeline::verify_images(&l.cfg, &ds),
        &pipeline::downstream_test(&l.cfg, &ds),
        t_s,
    )?;
    let out = l.run.write(rd::ATTACKS, report.to_csv())?;
    l.metadata("attack", &[&marked_path, &clean_path, &w_path], &[out])?;
    for r in &report.rows {
        println!(
            "{:<6} {:<4} T_sim WE {:.4e} ({}) T_cls CE {:.3} WE {:.3} acc CE {:.3} WE {:.3}",
            r.attack,
            r.param,
            r.t_sim_we,
            if r.verified_we { "verified" } else { "not verified" },
            r.t_cls_ce,
            r.t_cls_we,
            r.acc_ce,
            r.acc_we
        );
    }
    Ok(Outcome::Done)
}

pub fn predict(checkpoint: &Path, probe: &Path) -> Result<Outcome> {
    let m = DownstreamModel {
        encoder: EncoderModel::load(checkpoint)?,
        probe: LinearProbe::load(probe)?,
    };
    let d = m.encoder.arch.input_dim();
    let stdin = std::io::stdin();
    let mut pixels = Vec::new();
    let mut rows = 0;
    for (i, line) in stdin.lock().lines().enumerate() {
        let line = line.context("reading stdin")?;
        if line.trim().is_empty() {
            continue;
        }
        let v = decode_line(&line, d).map_err(|e| Error::Invalid(format!("line {}: {e}", i + 1)))?;
        pixels.extend(v);
        rows += 1;
    }
    let labels = m.predict(&Tensor::matrix(rows, d, pixels)?)?;
    let mut out = std::io::stdout().lock();
    for l in labels {
        writeln!(out, "{l}")?;
    }
    Ok(Outcome::Done)
}
