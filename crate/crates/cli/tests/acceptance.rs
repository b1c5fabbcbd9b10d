//! Acceptance battery. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run with `cargo test --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use samsnet_cli::verify;

const TOY_BUDGET_SECONDS: f64 = 15.0 * 60.0;
const GRADCHECK_BUDGET_SECONDS: f64 = 60.0;
const STFT_BUDGET_SECONDS: f64 = 5.0;
const BASELINE_MARGIN_DB: f64 = 3.0;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Default)]
struct Ledger {
    lines: Vec<(u32, String)>,
    failed: usize,
}

impl Ledger {
    fn record(&mut self, id: u32, title: &str, passed: bool, detail: impl AsRef<str>) {
        let verdict = if passed { "PASS" } else { "FAIL" };
        let line = format!("{verdict} [{id:>2}] {title}: {}", detail.as_ref());
        eprintln!("{line}");
        self.lines.push((id, line));
        if !passed {
            self.failed += 1;
        }
    }
}

fn samsnet(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_samsnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("`samsnet {}` exited {:?}: {}", args.join(" "), o.status.code(), String::from_utf8_lossy(&o.stderr)))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// Mean median SDR per source from an `eval.csv`.
fn source_means(csv: &str) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if let Some(v) = cols.get(2).and_then(|v| v.parse::<f64>().ok()).filter(|v| v.is_finite()) {
            let e = acc.entry(cols[1].to_string()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn average(means: &BTreeMap<String, f64>) -> f64 {
    means.values().sum::<f64>() / means.len().max(1) as f64
}

fn evaluate(ckpt: Option<&Path>, separator: &str, out: &Path, extra: &[&str]) -> Result<String, String> {
    let mut args = vec!["evaluate", "--toy", "--separator", separator, "--out", p(out)];
    if let Some(c) = ckpt {
        args.extend(["--checkpoints", p(c)]);
    }
    args.extend(extra);
    samsnet(&args)?;
    fs::read_to_string(out.join("eval.csv")).map_err(|e| e.to_string())
}

fn fmt_means(m: &BTreeMap<String, f64>) -> String {
    m.iter().map(|(k, v)| format!("{k} {v:.2}")).collect::<Vec<_>>().join(", ")
}

fn files_equal(a: &Path, b: &Path) -> Result<Vec<String>, String> {
    let mut names: Vec<String> = fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    names.sort();
    let mut differing = Vec::new();
    for n in &names {
        if fs::read(a.join(n)).ok() != fs::read(b.join(n)).ok() {
            differing.push(n.clone());
        }
    }
    Ok(differing)
}

fn toy_separation(l: &mut Ledger, work: &Path) -> Result<(), String> {
    let start = Instant::now();
    let ck = work.join("toy");
    samsnet(&["train", "--toy", "--out", p(&ck)])?;
    let summary = fs::read_to_string(ck.join("train_summary.csv")).map_err(|e| e.to_string())?;
    let halved = summary.lines().skip(1).all(|line| {
        let c: Vec<f64> = line.split(',').skip(1).take(2).filter_map(|v| v.parse().ok()).collect();
        c.len() == 2 && c[1] < 0.5 * c[0]
    });
    let model = source_means(&evaluate(Some(&ck), "model", &work.join("ev_model"), &[])?);
    let mixture = source_means(&evaluate(None, "mixture", &work.join("ev_mix"), &[])?);
    let irm = source_means(&evaluate(None, "irm", &work.join("ev_irm"), &[])?);
    let secs = start.elapsed().as_secs_f64();
    let margin = average(&model) - average(&mixture);
    let irm_wins = model.iter().all(|(s, v)| irm.get(s).is_some_and(|o| o > v));
    l.record(
        6,
        "toy separation end to end",
        halved && margin >= BASELINE_MARGIN_DB && irm_wins && secs < TOY_BUDGET_SECONDS && model.len() == 2,
        format!(
            "model avg {:.2} dB ({}), mixture avg {:.2} dB, margin {margin:.2} dB (need {BASELINE_MARGIN_DB}), \
             IRM ({}) above model on every source: {irm_wins}, training loss halved: {halved}, {secs:.0} s",
            average(&model),
            fmt_means(&model),
            average(&mixture),
            fmt_means(&irm),
        ),
    );

    let start = Instant::now();
    let sweep_dir = work.join("sweep");
    samsnet(&["sweep", "--toy", "--checkpoints", p(&ck), "--slices", "1,2,4", "--out", p(&sweep_dir)])?;
    let grid = fs::read_to_string(sweep_dir.join("sweep.csv")).map_err(|e| e.to_string())?;
    let plain = evaluate(Some(&ck), "model", &work.join("ev_i1"), &["--slices", "1"])?;
    let rows_i1: Vec<&str> = grid.lines().filter_map(|r| r.strip_prefix("1,")).collect();
    let expected: Vec<&str> = plain.lines().skip(1).collect();
    let complete = [1, 2, 4].iter().all(|i| {
        let prefix = format!("{i},");
        let rows: Vec<&str> = grid.lines().filter(|r| r.starts_with(&prefix)).collect();
        rows.len() == expected.len() && rows.iter().all(|r| !r.ends_with("skipped") && !r.ends_with("nan"))
    });
    let table = fs::read_to_string(sweep_dir.join("sweep.txt")).unwrap_or_default();
    l.record(
        8,
        "slice sweep harness",
        complete && rows_i1 == expected,
        format!(
            "grid I=1,2,4 x {} rows complete: {complete}, I=1 rows equal plain evaluate: {} ({:.0} s)\n{}",
            expected.len(),
            rows_i1 == expected,
            start.elapsed().as_secs_f64(),
            table.lines().map(|t| format!("         {t}")).collect::<Vec<_>>().join("\n")
        ),
    );

    let start = Instant::now();
    let mut with = vec![average(&model)];
    let mut without = Vec::new();
    for seed in ABLATION_SEEDS {
        let s = seed.to_string();
        if seed != 0 {
            let dir = work.join(format!("att{seed}"));
            samsnet(&["train", "--toy", "--seed", &s, "--out", p(&dir)])?;
            with.push(average(&source_means(&evaluate(Some(&dir), "model", &work.join(format!("ev_att{seed}")), &[])?)));
        }
        let dir = work.join(format!("noatt{seed}"));
        samsnet(&["train", "--toy", "--seed", &s, "--set", "attention=false", "--out", p(&dir)])?;
        without.push(average(&source_means(&evaluate(Some(&dir), "model", &work.join(format!("ev_noatt{seed}")), &[])?)));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let list = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/");
    l.record(
        7,
        "attention ablation direction",
        mean(&with) >= mean(&without),
        format!(
            "with attention {:.2} dB (seeds {}), without {:.2} dB (seeds {}), 200 steps each ({:.0} s)",
            mean(&with),
            list(&with),
            mean(&without),
            list(&without),
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

fn determinism(l: &mut Ledger, work: &Path) -> Result<(), String> {
    let start = Instant::now();
    let short = ["--set", "toy_seconds=8", "--seed", "3"];
    let mut differing = Vec::new();
    let mut compared = 0;
    let input = work.join("det_input.wav");
    for run in ["a", "b"] {
        let root = work.join(format!("det_{run}"));
        let ck = root.join("ck");
        samsnet(&[&["train", "--toy", "--steps", "20", "--out", p(&ck)][..], &short].concat())?;
        samsnet(&[&["evaluate", "--toy", "--checkpoints", p(&ck), "--out", p(&root.join("ev"))][..], &short].concat())?;
        samsnet(&[&["sweep", "--toy", "--checkpoints", p(&ck), "--slices", "1,3", "--out", p(&root.join("sw"))][..], &short].concat())?;
        if run == "a" {
            let wav = samsnet::data::toy_track("probe", 3.0, 8000, 9).map_err(|e| e.to_string())?;
            samsnet::signal::write_wav(&input, &wav.mixture, samsnet::signal::WavFormat::Float32)
                .map_err(|e| e.to_string())?;
        }
        samsnet(&["separate", "--checkpoints", p(&ck), "--input", p(&input), "--out", p(&root.join("sep"))])?;
    }
    for sub in ["ck", "ev", "sw", "sep"] {
        let (a, b) = (work.join("det_a").join(sub), work.join("det_b").join(sub));
        compared += fs::read_dir(&a).map_err(|e| e.to_string())?.filter(|e| {
            e.as_ref().is_ok_and(|e| !e.file_name().to_string_lossy().ends_with(".log"))
        }).count();
        differing.extend(files_equal(&a, &b)?.into_iter().filter(|n| !n.ends_with(".log")).map(|n| format!("{sub}/{n}")));
    }
    l.record(
        10,
        "determinism under a fixed seed",
        differing.is_empty() && compared > 0,
        format!(
            "{compared} checkpoint/report/audio files from train, evaluate, sweep and separate byte-identical across two runs{} ({:.0} s)",
            if differing.is_empty() { String::new() } else { format!("; differing: {}", differing.join(", ")) },
            start.elapsed().as_secs_f64()
        ),
    );
    Ok(())
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        // test listing by harness-aware runners
        return ExitCode::SUCCESS;
    }
    let started = Instant::now();
    let mut l = Ledger::default();
    l.lines.push((
        1,
        "N/A  [ 1] full-scale SDR: not reproducible at desk scale (100-song corpus, GPU-days, BSSEval v4); \
         criteria 2-10 substitute properties"
            .into(),
    ));

    let c = verify::model_gradients(None);
    l.record(2, "gradient fidelity", c.passed && c.seconds < GRADCHECK_BUDGET_SECONDS, format!("{} ({:.2} s)", c.detail, c.seconds));
    let c = verify::stft_roundtrip();
    l.record(3, "STFT/ISTFT round trip and linearity", c.passed && c.seconds < STFT_BUDGET_SECONDS, format!("{} ({:.2} s)", c.detail, c.seconds));
    let c = verify::slicing_equivalence();
    l.record(4, "slicing equivalence and locality", c.passed, &c.detail);
    let c = verify::parameter_count();
    l.record(5, "parameter count in [3.3M, 4.1M]", c.passed, &c.detail);
    let c = verify::metric_analytics();
    l.record(9, "metric analytics", c.passed, &c.detail);

    let work = tempfile::tempdir().expect("temp dir");
    if let Err(e) = toy_separation(&mut l, work.path()) {
        l.record(6, "toy separation end to end", false, &e);
    }
    if let Err(e) = determinism(&mut l, work.path()) {
        l.record(10, "determinism under a fixed seed", false, &e);
    }
    l.lines.sort_by_key(|(id, _)| *id);
    println!("acceptance criteria");
    for (_, line) in &l.lines {
        println!("{line}");
    }
    println!("{} failed, total {:.0} s", l.failed, started.elapsed().as_secs_f64());
    if l.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
