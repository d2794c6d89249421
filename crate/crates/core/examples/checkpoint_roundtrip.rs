//! Saves the parameters and Adam moments after a few optimizer steps,
//! reloads them and checks that training continues bit-identically.

use fsacdm::checkpoint;
use fsacdm::corpus::{generate, render};
use fsacdm::model::{Model, ModelConfig};
use fsacdm::train::{train_step, TrainConfig, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut mc = ModelConfig::default();
    mc.encoder.d_model = 16;
    mc.unet.markup_dim = 16;
    mc.weights.num_negatives = 2;
    let model = Model::new(mc)?;
    let corpus: Vec<_> = generate(5, 4).into_iter().map(|d| { let i = render(&d); (d, i) }).collect();
    let cfg = TrainConfig { steps: 6, lr: 1e-3, ..TrainConfig::default() };

    let mut state = TrainState::new(model.init_params(0)?);
    for _ in 0..3 {
        train_step(&model, &mut state, &corpus, &cfg)?;
    }
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("mid.fsac");
    checkpoint::save(&path, &state.to_store())?;
    println!("checkpoint: {} bytes, {} tensors", std::fs::metadata(&path)?.len(), state.to_store().len());

    let template = model.init_params(0)?;
    let mut resumed = TrainState::from_store(&checkpoint::load(&path)?, &template)?;
    for _ in 0..3 {
        let a = train_step(&model, &mut state, &corpus, &cfg)?;
        let b = train_step(&model, &mut resumed, &corpus, &cfg)?;
        println!("step {}  total {:.6} vs {:.6}", state.step, a.bundle.total, b.bundle.total);
    }
    let same = state.params.flatten() == resumed.params.flatten();
    println!("parameters identical after resume: {same}");
    if !same {
        return Err("resumed run diverged".into());
    }
    Ok(())
}
