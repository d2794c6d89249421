//! Uni-modal encoders and fine-grained sequence alignment.
//!
//! The markup side is a closed-vocabulary embedding table plus learned
//! positions. The image side is a four-layer strided residual conv stack,
//! a map-to-sequence step that turns feature columns into left-to-right
//! tokens, and a bidirectional LSTM whose concatenated states replace the
//! visual token sequence. A single-head cross attention from markup tokens
//! onto that sequence yields features of markup length, which the alignment
//! loss pulls toward the same-index token and away from the others.

mod align;
mod recurrent;
mod visual;

pub use align::{cam, fa_loss, CamOutput};
pub use recurrent::bidir_context;
pub use visual::{encode_image, map_to_sequence};

use crate::corpus::grammar::MAX_TOKENS;
use crate::corpus::{MarkupDoc, RenderedImage, VOCAB_SIZE};
use crate::error::ModelError;
use crate::numerics::{Binding, ParamStore, Var};

/// Dimensions of the encoder stack.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub max_tokens: usize,
    /// Model width `D`; must be even (two LSTM directions of `D/2`).
    pub d_model: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of the four conv layers; the last is `C`.
    pub conv_channels: [usize; 4],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab: VOCAB_SIZE,
            max_tokens: MAX_TOKENS,
            d_model: 64,
            image_height: 32,
            image_width: 128,
            conv_channels: [16, 32, 64, 64],
        }
    }
}

/// Strides of the conv stack: full resolution, then three halvings.
pub const CONV_STRIDES: [usize; 4] = [1, 2, 2, 2];

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(ModelError::Config(format!("d_model must be even and positive, got {}", self.d_model)));
        }
        if self.conv_channels.contains(&0) {
            return Err(ModelError::Config("conv channels must be positive".into()));
        }
        if self.vocab == 0 || self.max_tokens == 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(ModelError::Config("encoder extents must be positive".into()));
        }
        Ok(())
    }

    /// Feature-map extents `(C, H', W')` after the conv stack.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.image_height, self.image_width);
        for s in CONV_STRIDES {
            h = (h + 2 - 3) / s + 1;
            w = (w + 2 - 3) / s + 1;
        }
        (self.conv_channels[3], h, w)
    }
}

/// Initialises every encoder parameter under the `enc.` prefix.
pub fn init_encoders(store: &mut ParamStore, seed: u64, cfg: &EncoderConfig) -> Result<(), ModelError> {
    cfg.validate()?;
    let d = cfg.d_model;
    store.init_normal(seed, "enc.tok_emb", &[cfg.vocab, d], 0.5);
    store.init_normal(seed, "enc.pos_emb", &[cfg.max_tokens, d], 0.1);
    visual::init(store, seed, cfg);
    recurrent::init(store, seed, "enc.lstm", d);
    align::init(store, seed, d);
    Ok(())
}

/// Row `i` is `embedding(token_i) + positional(i)`; shape `N×D`.
pub fn encode_markup(b: &mut Binding, doc: &MarkupDoc) -> Result<Var, ModelError> {
    let ids: Vec<usize> = doc.tokens.iter().map(|t| t.id()).collect();
    encode_token_ids(b, &ids)
}

/// Markup embedding from raw token ids. Ids outside the table are rejected.
pub fn encode_token_ids(b: &mut Binding, ids: &[usize]) -> Result<Var, ModelError> {
    let table = b.p("enc.tok_emb");
    let (vocab, _) = b.tape.value(table).dims2()?;
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(ModelError::Vocabulary { id, vocab });
    }
    let pos = b.p("enc.pos_emb");
    let max = b.tape.shape(pos)[0];
    if ids.is_empty() || ids.len() > max {
        return Err(ModelError::Shape(format!("markup length {} outside 1..={max}", ids.len())));
    }
    let tok = b.tape.gather_rows(table, ids);
    let pos_rows = b.tape.slice_rows(pos, 0, ids.len());
    Ok(b.tape.add(tok, pos_rows))
}

/// Everything the alignment branch produces for one (markup, image) pair.
pub struct AlignmentOutput {
    pub t: Var,
    pub h: Var,
    pub cam: CamOutput,
    pub l_fa: Var,
}

/// Markup embedding, visual sequence with recurrent context, cross
/// attention and alignment loss for one pair.
pub fn align_pair(
    b: &mut Binding,
    cfg: &EncoderConfig,
    doc: &MarkupDoc,
    img: &RenderedImage,
) -> Result<AlignmentOutput, ModelError> {
    let t = encode_markup(b, doc)?;
    let v = encode_image(b, cfg, img)?;
    let vs = map_to_sequence(b, v);
    let h = bidir_context(b, vs);
    let cam_out = cam(b, t, h);
    let l_fa = fa_loss(&mut b.tape, cam_out.c, t)?;
    Ok(AlignmentOutput { t, h, cam: cam_out, l_fa })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{render, Token};
    use crate::numerics::DenseArray;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        init_encoders(&mut s, 1, &EncoderConfig::default()).unwrap();
        s
    }

    #[test]
    fn identical_docs_embed_identically() {
        let s = store();
        let doc = MarkupDoc::parse("a+\\frac{b}{c}").unwrap();
        let mut b1 = Binding::frozen(&s);
        let mut b2 = Binding::frozen(&s);
        let e1 = encode_markup(&mut b1, &doc).unwrap();
        let e2 = encode_markup(&mut b2, &doc).unwrap();
        assert_eq!(b1.tape.value(e1), b2.tape.value(e2));
        assert_eq!(b1.tape.shape(e1), &[doc.len(), 64]);
    }

    #[test]
    fn zero_table_leaves_positions() {
        let mut s = store();
        s.insert("enc.tok_emb", DenseArray::zeros(&[VOCAB_SIZE, 64]));
        let doc = MarkupDoc::parse("x=1").unwrap();
        let mut b = Binding::frozen(&s);
        let e = encode_markup(&mut b, &doc).unwrap();
        let pos = s.get("enc.pos_emb").unwrap();
        assert_eq!(b.tape.value(e).data(), &pos.data()[..3 * 64]);
    }

    #[test]
    fn swapping_tokens_changes_only_their_rows() {
        let s = store();
        let a = MarkupDoc::parse("a+b").unwrap();
        let swapped = MarkupDoc::parse("b+a").unwrap();
        let mut b = Binding::frozen(&s);
        let ea = encode_markup(&mut b, &a).unwrap();
        let eb = encode_markup(&mut b, &swapped).unwrap();
        let (va, vb) = (b.tape.value(ea).clone(), b.tape.value(eb).clone());
        let table = s.get("enc.tok_emb").unwrap();
        let emb = |t: Token| table.row(t.id()).to_vec();
        assert_eq!(va.row(1), vb.row(1));
        for (pos, (from, to)) in [(0, ('a', 'b')), (2, ('b', 'a'))] {
            let diff: Vec<f64> = va.row(pos).iter().zip(vb.row(pos)).map(|(x, y)| y - x).collect();
            let expected: Vec<f64> =
                emb(Token::Atom(to)).iter().zip(emb(Token::Atom(from))).map(|(x, y)| x - y).collect();
            for (d, e) in diff.iter().zip(&expected) {
                assert!((d - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let s = store();
        let mut b = Binding::frozen(&s);
        assert_eq!(
            encode_token_ids(&mut b, &[0, VOCAB_SIZE]).unwrap_err(),
            ModelError::Vocabulary { id: VOCAB_SIZE, vocab: VOCAB_SIZE }
        );
    }

    #[test]
    fn full_alignment_branch_shapes() {
        let s = store();
        let doc = MarkupDoc::parse("x^{2}+y=1").unwrap();
        let img = render(&doc);
        let mut b = Binding::frozen(&s);
        let out = align_pair(&mut b, &EncoderConfig::default(), &doc, &img).unwrap();
        assert_eq!(b.tape.shape(out.h), &[16, 64]);
        assert_eq!(b.tape.shape(out.cam.c), &[doc.len(), 64]);
        let l = b.tape.scalar(out.l_fa);
        assert!((-1.0..=3.0).contains(&l));
    }

    #[test]
    fn feature_dims_for_default_image() {
        assert_eq!(EncoderConfig::default().feature_dims(), (64, 4, 16));
    }
}
