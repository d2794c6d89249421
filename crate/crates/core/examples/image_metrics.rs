//! Scores shifted, blurred and blank variants of a rendering against the
//! original with every image metric.

use fsacdm::corpus::{render, MarkupDoc, RenderedImage};
use fsacdm::diffusion::{box_blur, translate};
use fsacdm::metrics::pair_metrics;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let reference = render(&MarkupDoc::parse("\\frac{x+1}{y}=z^{2}")?);
    let variants: [(&str, RenderedImage); 4] = [
        ("identical", reference.clone()),
        ("shift 2px", translate(&reference, 2, 0)),
        ("blurred", box_blur(&reference)),
        ("blank", RenderedImage::blank(reference.height, reference.width)),
    ];
    println!("{:<10} {:>8} {:>7} {:>7} {:>8} {:>8} {:>8}", "variant", "dtw", "rmse", "ssim", "psnr", "ergas", "rase");
    for (name, img) in &variants {
        let m = pair_metrics(&reference, img)?;
        println!(
            "{name:<10} {:>8.2} {:>7.4} {:>7.4} {:>8.2} {:>8.2} {:>8.2}",
            m.dtw, m.rmse, m.ssim, m.psnr, m.ergas, m.rase
        );
    }
    Ok(())
}
