//! One forward pass of the markup-conditioned U-Net: noise a rendering,
//! predict the noise under the matching and a mismatched markup, and time
//! the pass.

use std::time::Instant;

use fsacdm::ccam::unet_eps;
use fsacdm::corpus::{render, MarkupDoc};
use fsacdm::diffusion::{forward_sample, image_to_signal};
use fsacdm::encoders::encode_markup;
use fsacdm::model::{Model, ModelConfig};
use fsacdm::numerics::{Binding, DenseArray, Purpose, RngStream};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = Model::new(ModelConfig::default())?;
    let store = model.init_params(0)?;
    println!("{} tensors, {} scalars", store.len(), store.num_scalars());

    let doc = MarkupDoc::parse("a_{i}+\\frac{b}{c}")?;
    let other = MarkupDoc::parse("z^{9}")?;
    let y0 = image_to_signal(&render(&doc));
    let eps = DenseArray::new(y0.shape().to_vec(), RngStream::new(0, Purpose::Noise, 0).normals(y0.len()))?;
    let t = 20;
    let yt = forward_sample(&model.schedule, &y0, t, &eps)?;

    let mut predictions = Vec::new();
    for d in [&doc, &other] {
        let start = Instant::now();
        let mut b = Binding::frozen(&store);
        let cond = encode_markup(&mut b, d)?;
        let y = b.constant(yt.clone());
        let e = unet_eps(&mut b, &model.config.unet, y, t, cond)?;
        let pred = b.tape.value(e).clone();
        let mse = pred.data().iter().zip(eps.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / pred.len() as f64;
        println!("{:<20} eps mse {mse:.4}  ({:.0} ms)", d.source_text, start.elapsed().as_secs_f64() * 1e3);
        predictions.push(pred);
    }
    println!("prediction shift from markup swap: {:.3e}", predictions[0].max_abs_diff(&predictions[1]));
    Ok(())
}
