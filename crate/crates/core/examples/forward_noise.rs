//! Pushes a rendered formula through the forward noising chain and prints
//! the signal fraction and the correlation with the clean image per step.

use fsacdm::corpus::{render, MarkupDoc};
use fsacdm::diffusion::{forward_sample, image_to_signal, NoiseSchedule};
use fsacdm::numerics::{DenseArray, Purpose, RngStream};

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let y0 = image_to_signal(&render(&MarkupDoc::parse("\\frac{1}{n}+y_{k}")?));
    let mut rng = RngStream::new(0, Purpose::Noise, 0);
    let eps = DenseArray::new(y0.shape().to_vec(), rng.normals(y0.len()))?;
    for (label, schedule) in
        [("1e-4..0.02", NoiseSchedule::linear(50, 1e-4, 0.02)?), ("2e-3..0.4", NoiseSchedule::linear(50, 2e-3, 0.4)?)]
    {
        println!("beta {label}");
        for t in [0, 1, 5, 10, 25, 50] {
            let yt = forward_sample(&schedule, &y0, t, &eps)?;
            println!("  t={t:>2}  sqrt(abar)={:.4}  corr(y_t, y_0)={:.4}", schedule.alpha_bar(t).sqrt(), corr(yt.data(), y0.data()));
        }
    }
    Ok(())
}
