//! Corpus, a short training run, sampling and evaluation in a scratch
//! directory, using a reduced U-Net so it finishes in seconds. A real run
//! uses `configs/overfit.toml` through the binary.

use fsacdm::cli::{cmd_corpus, cmd_eval, cmd_sample, cmd_train, RunConfig};
use fsacdm::train::{read_log, LOG_FILE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let cfg = RunConfig {
        d_model: 16,
        ccam_blocks: 1,
        crossattn_blocks: 1,
        corpus_size: 6,
        num_negatives: 2,
        beta_start: 2e-3,
        beta_end: 0.4,
        lr: 1e-3,
        warmup_steps: 5,
        steps: 20,
        checkpoint_every: 10,
        corpus_dir: dir.path().join("corpus"),
        out_dir: dir.path().join("run"),
        ..RunConfig::default()
    };
    cfg.validate()?;

    let n = cmd_corpus(&cfg, &cfg.corpus_dir)?;
    println!("corpus: {n} documents");
    let state = cmd_train(&cfg, false, |step, b| {
        if step % 5 == 0 {
            println!("step {step:>3}  total {:>12.2}  l_fa {:.4}  l_cl {:.4}", b.total, b.l_fa, b.l_cl);
        }
    })?;
    println!("trained to step {}, {} log rows", state.step, read_log(&cfg.out_dir.join(LOG_FILE))?.len());

    let written = cmd_sample(&cfg, None, None)?;
    println!("sampled {} images", written.len());
    let report = cmd_eval(&cfg, None, None, false)?;
    let m = report.mean;
    println!("mean dtw {:.2}  rmse {:.4}  ssim {:.4}  psnr {:.2}", m.dtw, m.rmse, m.ssim, m.psnr);
    Ok(())
}
