//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test -p tweetbench-core --test acceptance`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use tweetbench_core::corpus::{load_dataset, Subtask};
use tweetbench_core::encoder::EncoderConfig;
use tweetbench_core::harness::{
    binary_vs_multiclass_study, fixture_config_path, run_experiment_in, LoadedConfig, StudyOptions,
};
use tweetbench_core::selftest::{self, SelftestOptions};

/// Directory holding official SemEval files as `{A,B}/{train,test,devtest}.tsv`.
const SEMEVAL_ENV: &str = "TWEETBENCH_SEMEVAL_DIR";

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
    run: fn() -> Verdict,
}

fn from_check(r: Result<String, String>) -> Verdict {
    match r {
        Ok(d) => Verdict::Pass(d),
        Err(d) => Verdict::Fail(d),
    }
}

fn opts() -> SelftestOptions {
    SelftestOptions::default()
}

fn metrics_oracle() -> Verdict {
    from_check(selftest::metrics_oracle(&opts()))
}

fn nb_hand_example() -> Verdict {
    from_check(selftest::nb_hand_example(&opts()))
}

fn gradient_check() -> Verdict {
    from_check(selftest::grad_check_desk(&opts()))
}

fn masking_statistics() -> Verdict {
    from_check(selftest::mlm_masking(&opts()))
}

fn overfit() -> Verdict {
    match selftest::overfit_toy_run(0, 200) {
        Ok((epochs, 1.0)) => Verdict::Pass(format!("100% train accuracy after {epochs} epochs")),
        Ok((epochs, acc)) => Verdict::Fail(format!("train accuracy {acc:.4} after {epochs} epochs")),
        Err(e) => Verdict::Fail(e),
    }
}

fn run_fixture(config: &str, out: &Path) -> Result<tweetbench_core::RunResult, String> {
    let loaded = LoadedConfig::load(fixture_config_path(config)).map_err(|e| e.to_string())?;
    run_experiment_in(&loaded, out).map_err(|e| e.to_string())
}

fn ordering() -> Verdict {
    let out = tempfile::tempdir().expect("tempdir");
    let mut notes = Vec::new();
    for config in ["nb_b500.json", "encoder_b500.json"] {
        match run_fixture(config, out.path()) {
            Ok(run) => {
                let acc = run.report.metrics.accuracy;
                notes.push(format!("{} {acc:.4}", run.report.name));
                if acc < 0.9 {
                    return Verdict::Fail(format!("{} test accuracy {acc:.4} < 0.9", run.report.name));
                }
            }
            Err(e) => return Verdict::Fail(e),
        }
    }
    let study = match binary_vs_multiclass_study(0, &StudyOptions::default()) {
        Ok(s) => s,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    for r in &study.rows {
        notes.push(format!(
            "{} binary {:.4} >= five-class {:.4}",
            r.model, r.binary_accuracy, r.five_class_accuracy
        ));
    }
    if study.rows.len() != 2 || !study.passed() {
        return Verdict::Fail(notes.join("; "));
    }
    Verdict::Pass(notes.join("; "))
}

fn determinism() -> Verdict {
    let mut notes = Vec::new();
    for config in ["nb_b200.json", "encoder_b200.json"] {
        let (a, b) = (
            tempfile::tempdir().expect("tempdir"),
            tempfile::tempdir().expect("tempdir"),
        );
        let runs = (run_fixture(config, a.path()), run_fixture(config, b.path()));
        let (ra, rb) = match runs {
            (Ok(x), Ok(y)) => (x, y),
            (Err(e), _) | (_, Err(e)) => return Verdict::Fail(e),
        };
        for file in ["predictions.tsv", "report.json"] {
            let read = |dir: &Path| std::fs::read(dir.join(file)).unwrap_or_default();
            if read(&ra.run_dir) != read(&rb.run_dir) {
                return Verdict::Fail(format!("{config}: {file} differs between reruns"));
            }
        }
        notes.push(config.trim_end_matches(".json").to_string());
    }
    Verdict::Pass(format!(
        "byte-identical predictions.tsv and report.json for {}",
        notes.join(", ")
    ))
}

fn official_counts() -> Verdict {
    let Some(root) = std::env::var_os(SEMEVAL_ENV).map(PathBuf::from) else {
        return Verdict::Skip(format!("set {SEMEVAL_ENV} to the official data to run this check"));
    };
    let expected = [(Subtask::A, [5868, 20632, 2000]), (Subtask::B, [4309, 10551, 1417])];
    let mut notes = Vec::new();
    let mut failed = false;
    for (subtask, counts) in expected {
        for (split, want) in ["train", "test", "devtest"].into_iter().zip(counts) {
            let path = root.join(subtask.to_string()).join(format!("{split}.tsv"));
            match load_dataset(&path, subtask) {
                Ok(ds) => {
                    let got = ds.len() + ds.skipped_unavailable;
                    failed |= got != want;
                    notes.push(format!("{subtask}/{split} {got} (want {want})"));
                }
                Err(e) => {
                    failed = true;
                    notes.push(e.to_string());
                }
            }
        }
    }
    if failed {
        Verdict::Fail(notes.join("; "))
    } else {
        Verdict::Pass(notes.join("; "))
    }
}

fn parameter_count() -> Verdict {
    let n = EncoderConfig::base(3).parameter_count();
    let rel = (n as f64 / 110e6 - 1.0).abs();
    let msg = format!("base config {n} parameters, {:.2}% from 110M", rel * 100.0);
    if rel <= 0.05 {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(msg)
    }
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion {
            id: 1,
            name: "metrics oracle",
            budget: secs(10),
            run: metrics_oracle,
        },
        Criterion {
            id: 2,
            name: "naive Bayes hand example",
            budget: secs(1),
            run: nb_hand_example,
        },
        Criterion {
            id: 3,
            name: "gradient check",
            budget: secs(120),
            run: gradient_check,
        },
        Criterion {
            id: 4,
            name: "MLM masking statistics",
            budget: secs(5),
            run: masking_statistics,
        },
        Criterion {
            id: 5,
            name: "overfit toy set",
            budget: secs(300),
            run: overfit,
        },
        Criterion {
            id: 6,
            name: "qualitative ordering",
            budget: secs(600),
            run: ordering,
        },
        Criterion {
            id: 7,
            name: "determinism",
            budget: Duration::MAX,
            run: determinism,
        },
        Criterion {
            id: 8,
            name: "official data counts",
            budget: Duration::MAX,
            run: official_counts,
        },
        Criterion {
            id: 9,
            name: "parameter count",
            budget: secs(1),
            run: parameter_count,
        },
    ];
    let mut failures = 0;
    for c in &criteria {
        let start = Instant::now();
        let verdict = (c.run)();
        let elapsed = start.elapsed();
        let (tag, detail) = match verdict {
            Verdict::Pass(_) if elapsed > c.budget => (
                "FAIL",
                format!("took {:.1}s, budget {}s", elapsed.as_secs_f64(), c.budget.as_secs()),
            ),
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => ("FAIL", d),
            Verdict::Skip(d) => ("SKIP", d),
        };
        if tag == "FAIL" {
            failures += 1;
        }
        println!("{tag} [{}] {} ({:.2}s): {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
