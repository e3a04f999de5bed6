//! Result files: `runs.csv`, `summary.csv`, PPM reward maps and the manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::envs::{BenchmarkEnv, EnvKind};
use crate::error::{Error, Result};
use crate::experiment::{ExperimentOutput, RunRecord, Stat, SummaryRow};

/// Significant digits of every float written to CSV.
pub const SIGNIFICANT_DIGITS: usize = 9;

pub const RUNS_HEADER: [&str; 9] = [
    "run_id",
    "seed",
    "algorithm",
    "env",
    "iteration",
    "avg_evd",
    "transfer_avg_evd",
    "k_predicted",
    "wall_ms",
];

pub const SUMMARY_HEADER: [&str; 19] = [
    "point",
    "algorithm",
    "env",
    "alpha",
    "fixed_k",
    "n_ok",
    "n_failed",
    "avg_evd_mean",
    "avg_evd_se",
    "transfer_avg_evd_mean",
    "transfer_avg_evd_se",
    "k_mean",
    "k_se",
    "accuracy_mean",
    "accuracy_se",
    "iteration_ms_mean",
    "iteration_ms_se",
    "degenerate",
    "repeats",
];

/// Formats `x` with [`SIGNIFICANT_DIGITS`] significant digits, in plain
/// notation for moderate exponents and scientific notation otherwise, with
/// trailing zeros removed.
pub fn format_float(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let p = SIGNIFICANT_DIGITS;
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= p as i32 {
        format!("{}e{}", trim_zeros(mantissa), exp)
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `x` rounded to what [`format_float`] writes.
pub fn round_sig(x: f64) -> f64 {
    format_float(x).parse().unwrap_or(x)
}

fn writer_for(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(file))
}

pub fn write_runs_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = writer_for(path)?;
    w.write_record(RUNS_HEADER)
        .map_err(|e| Error::csv(path, e))?;
    for r in records {
        w.write_record([
            r.run_id.clone(),
            r.seed.to_string(),
            r.algorithm.clone(),
            r.env.clone(),
            r.iteration.to_string(),
            format_float(r.avg_evd),
            r.transfer_avg_evd.map(format_float).unwrap_or_default(),
            r.k_predicted.to_string(),
            format_float(r.wall_ms),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    if headers.iter().ne(RUNS_HEADER.iter().copied()) {
        return Err(Error::Parse(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

fn stat_cells(s: Option<Stat>) -> [String; 2] {
    match s {
        Some(s) => [format_float(s.mean), format_float(s.se)],
        None => [String::new(), String::new()],
    }
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow], repeats: usize) -> Result<()> {
    let mut w = writer_for(path)?;
    w.write_record(SUMMARY_HEADER)
        .map_err(|e| Error::csv(path, e))?;
    for r in rows {
        let mut cells = vec![
            r.point.to_string(),
            r.algorithm.to_string(),
            r.env.name().to_string(),
            format_float(r.alpha),
            r.fixed_k.map(|k| k.to_string()).unwrap_or_default(),
            r.n_ok.to_string(),
            r.n_failed.to_string(),
        ];
        for s in [
            r.avg_evd,
            r.transfer_avg_evd,
            r.k_predicted,
            r.accuracy,
            r.iteration_ms,
        ] {
            cells.extend(stat_cells(s));
        }
        cells.push(r.degenerate.to_string());
        cells.push(repeats.to_string());
        w.write_record(&cells).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plain-text grayscale PPM (P2, maxval 255) of a `width`-wide row-major map,
/// min-max normalized; a constant map is uniformly 128.
pub fn ppm_p2(values: &[f64], width: usize) -> Result<String> {
    if width == 0 || values.len() % width != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} values do not form rows of width {width}",
            values.len()
        )));
    }
    let height = values.len() / width;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixel = |v: f64| -> u8 {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            128
        }
    };
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|&v| pixel(v).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Learned (one per head) and true (one per demonstrated intention) reward
/// maps of the first successful repeat of every configuration point.
fn write_images(output: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    let config = &output.config;
    if config.env.kind == EnvKind::GridWorld && config.env.size * config.env.size == 0 {
        return Ok(Vec::new());
    }
    let mut written = Vec::new();
    for point in 0..config.points().len() {
        let Some((outcome, summary)) = output
            .outcomes_for(point)
            .find_map(|o| o.result.as_ref().ok().map(|s| (o, s)))
        else {
            continue;
        };
        let env = BenchmarkEnv::generate(config.env, outcome.seeds.env)?;
        let width = config.env.size;
        for k in 0..summary.net.n_heads() {
            let reward = summary.net.forward(&env.features, k)?;
            let path = dir.join(format!("reward_p{point}_learned_{k}.ppm"));
            write_text(&path, &ppm_p2(&reward, width)?)?;
            written.push(path);
        }
        for &i in &config.intentions {
            let path = dir.join(format!("reward_p{point}_true_{i}.ppm"));
            write_text(&path, &ppm_p2(&env.true_rewards[i], width)?)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Writes `runs.csv`, `summary.csv`, `manifest.txt` and, when enabled, the
/// reward maps into `dir` (created if missing). Returns the written paths.
pub fn write_outputs(output: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let runs = dir.join("runs.csv");
    write_runs_csv(&runs, &output.records)?;
    let summary = dir.join("summary.csv");
    write_summary_csv(&summary, &output.summaries, output.config.repeats)?;
    let manifest = dir.join("manifest.txt");
    let mut text = String::from("# resolved configuration\n");
    text.push_str(&output.config.to_text());
    for o in &output.outcomes {
        if let Err(e) = &o.result {
            text.push_str(&format!(
                "# failed {}: {}\n",
                o.run_id,
                e.replace('\n', " ")
            ));
        }
    }
    write_text(&manifest, &text)?;
    let mut written = vec![runs, summary, manifest];
    if output.config.images {
        written.extend(write_images(output, dir)?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(i: usize, evd: f64) -> RunRecord {
        RunRecord {
            run_id: format!("p0-r{i}"),
            seed: 42 + i as u64,
            algorithm: "SEM".into(),
            env: "binaryworld".into(),
            iteration: i + 1,
            avg_evd: round_sig(evd),
            transfer_avg_evd: if i % 2 == 0 {
                Some(round_sig(evd / 3.0))
            } else {
                None
            },
            k_predicted: 1 + i % 3,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn float_formatting() {
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(1.0), "1");
        assert_eq!(format_float(0.1), "0.1");
        assert_eq!(format_float(1.0 / 3.0), "0.333333333");
        assert_eq!(format_float(123456.789012345), "123456.789");
        assert_eq!(format_float(-2.5e-7), "-2.5e-7");
        assert_eq!(format_float(6.02214076e23), "6.02214076e23");
        assert_eq!(format_float(999999999.5), "1e9");
        assert_eq!(format_float(12345678.91), "12345678.9");
    }

    #[test]
    fn empty_records_give_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        write_runs_csv(&path, &[]).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            format!("{}\n", RUNS_HEADER.join(","))
        );
        assert!(read_runs_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn runs_csv_round_trip_and_quoting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        let mut records: Vec<RunRecord> =
            (0..5).map(|i| record(i, 1.0 / (i as f64 + 7.0))).collect();
        records[1].run_id = "odd,\"name\"".into();
        write_runs_csv(&path, &records).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.contains("\"odd,\"\"name\"\"\""));
        assert_eq!(read_runs_csv(&path).unwrap(), records);
    }

    #[test]
    fn ppm_constant_map_is_mid_gray() {
        let text = ppm_p2(&[3.5; 6], 3).unwrap();
        assert_eq!(text, "P2\n3 2\n255\n128 128 128\n128 128 128\n");
        let text = ppm_p2(&[0.0, 1.0, 0.5, 2.0], 2).unwrap();
        assert_eq!(text, "P2\n2 2\n255\n0 128\n64 255\n");
        assert!(ppm_p2(&[1.0; 5], 2).is_err());
    }

    proptest! {
        #[test]
        fn round_sig_is_idempotent(x in prop::num::f64::NORMAL) {
            let r = round_sig(x);
            prop_assert_eq!(format_float(r), format_float(x));
            prop_assert_eq!(round_sig(r), r);
            prop_assert!(((r - x) / x).abs() <= 5e-9);
        }
    }
}
