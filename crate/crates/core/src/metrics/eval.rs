//! Directory-level evaluation: pairs generated and ground-truth images by
//! file stem and reports per-pair metrics and their means.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{pair_metrics, MetricsError, PairMetrics};
use crate::corpus::io::read_image;
use crate::corpus::CorpusError;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub metrics: PairMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<EvalRow>,
    pub mean: PairMetrics,
    /// Files present in only one directory.
    pub unmatched: Vec<String>,
}

fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>, MetricsError> {
    let entries = fs::read_dir(dir).map_err(|e| CorpusError::Io(format!("{}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| CorpusError::Io(format!("{}: {e}", dir.display())))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("pgm" | "png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Evaluates every generated image against the ground-truth image with the
/// same stem. Unmatched files are an error unless `allow_partial`.
pub fn evaluate_set(
    generated_dir: &Path,
    truth_dir: &Path,
    allow_partial: bool,
    threads: usize,
) -> Result<MetricReport, MetricsError> {
    let generated = images_by_stem(generated_dir)?;
    let truth = images_by_stem(truth_dir)?;
    let unmatched: Vec<String> = generated
        .keys()
        .filter(|k| !truth.contains_key(*k))
        .map(|k| generated[k].display().to_string())
        .chain(truth.keys().filter(|k| !generated.contains_key(*k)).map(|k| truth[k].display().to_string()))
        .collect();
    if !unmatched.is_empty() && !allow_partial {
        return Err(MetricsError::Unmatched(unmatched));
    }
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> =
        generated.iter().filter_map(|(k, g)| truth.get(k).map(|t| (k, g, t))).collect();
    if pairs.is_empty() {
        return Err(MetricsError::Unmatched(unmatched));
    }

    let threads = threads.clamp(1, pairs.len());
    let chunk = pairs.len().div_ceil(threads);
    let results: Vec<Result<EvalRow, MetricsError>> = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|(name, g, t)| {
                            let metrics = pair_metrics(&read_image(t)?, &read_image(g)?)?;
                            Ok(EvalRow { name: g.file_name().map_or((*name).clone(), |f| f.to_string_lossy().into_owned()), metrics })
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let n = rows.len() as f64;
    let avg = |f: fn(&PairMetrics) -> f64| rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    let mean = PairMetrics {
        dtw: avg(|m| m.dtw),
        rmse: avg(|m| m.rmse),
        ssim: avg(|m| m.ssim),
        psnr: avg(|m| m.psnr),
        ergas: avg(|m| m.ergas),
        rase: avg(|m| m.rase),
    };
    Ok(MetricReport { rows, mean, unmatched })
}

/// CSV with a header, one row per pair and a final `mean` row.
pub fn write_csv(report: &MetricReport, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "filename,dtw,rmse,ssim,psnr,ergas,rase")?;
    let line = |name: &str, m: &PairMetrics| {
        format!("{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}", m.dtw, m.rmse, m.ssim, m.psnr, m.ergas, m.rase)
    };
    for r in &report.rows {
        writeln!(out, "{}", line(&r.name, &r.metrics))?;
    }
    writeln!(out, "{}", line("mean", &report.mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::io::{write_pgm, write_png};
    use crate::corpus::{generate, render};

    #[test]
    fn pairs_by_stem_and_reports_means() {
        let (gen, truth) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let docs = generate(1, 3);
        for (i, d) in docs.iter().enumerate() {
            write_pgm(&truth.path().join(format!("{i:06}.pgm")), &render(d)).unwrap();
            write_png(&gen.path().join(format!("{i:06}.png")), &render(&docs[(i + 1) % 3])).unwrap();
        }
        let report = evaluate_set(gen.path(), truth.path(), false, 2).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[0].name, "000000.png");
        let mean_dtw = report.rows.iter().map(|r| r.metrics.dtw).sum::<f64>() / 3.0;
        assert!((report.mean.dtw - mean_dtw).abs() < 1e-12);
        let mut csv = Vec::new();
        write_csv(&report, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().last().unwrap().starts_with("mean,"));
    }

    #[test]
    fn unmatched_files_need_opt_in() {
        let (gen, truth) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let img = render(&generate(2, 1)[0]);
        write_pgm(&truth.path().join("a.pgm"), &img).unwrap();
        write_pgm(&truth.path().join("b.pgm"), &img).unwrap();
        write_pgm(&gen.path().join("a.pgm"), &img).unwrap();
        match evaluate_set(gen.path(), truth.path(), false, 1) {
            Err(MetricsError::Unmatched(list)) => assert!(list[0].ends_with("b.pgm")),
            other => panic!("{other:?}"),
        }
        let report = evaluate_set(gen.path(), truth.path(), true, 1).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].metrics.dtw, 0.0);
        assert_eq!(report.unmatched.len(), 1);
    }
}
