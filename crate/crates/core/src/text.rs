//! Whitespace tokenizer, corpus vocabulary, and the text encoder branch.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{encoder_stack, AttentionMask, Ctx, EncoderLayerParams, Initializer, ParamId};
use crate::tensor::Var;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;
pub const URL: usize = 3;
pub const USER: usize = 4;
pub const EMOJI: usize = 5;

pub const RESERVED: [&str; 6] = ["[PAD]", "[CLS]", "[UNK]", "[URL]", "[USER]", "[EMOJI]"];
pub const NUM_RESERVED: usize = RESERVED.len();

/// Placeholders written by text normalization, and the ids they map to.
pub const SURFACE_FORMS: [(&str, usize); 3] = [("HTTPURL", URL), ("@USER", USER), ("EMOJI", EMOJI)];

/// Dense token-to-id map; ids `0..6` are the reserved tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn is_special(word: &str) -> bool {
    RESERVED.contains(&word) || SURFACE_FORMS.iter().any(|(s, _)| *s == word)
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("vocab line {}: invalid token {t:?}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("vocab line {}: duplicate token {t:?}", i + 1)));
            }
        }
        if tokens.len() < NUM_RESERVED || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::Data(format!("vocab must start with the reserved tokens {RESERVED:?}")));
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary of the most frequent words of `texts` (ties broken
    /// lexicographically), holding at most `cap` entries including reserved ones.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for w in text.split_whitespace().filter(|w| !is_special(w)) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .copied()
            .chain(words.into_iter().map(|(w, _)| w))
            .take(cap.max(NUM_RESERVED))
            .map(String::from)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Id of one whitespace token; unknown words map to `[UNK]`.
    pub fn id(&self, word: &str) -> usize {
        if let Some((_, id)) = SURFACE_FORMS.iter().find(|(s, _)| *s == word) {
            return *id;
        }
        match self.index.get(word) {
            Some(&id) if id != PAD && id != CLS => id,
            _ => UNK,
        }
    }

    /// Token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(String::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// `[CLS]` followed by the ids of the whitespace tokens of `text`, truncated
/// or padded to `max_len`, with the mask of real positions.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> (Vec<usize>, Vec<bool>) {
    assert!(max_len >= 1, "max_len must leave room for [CLS]");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(text.split_whitespace().map(|w| vocab.id(w)).take(max_len - 1));
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < real).collect();
    (ids, mask)
}

/// Inverse of [`tokenize`] on real positions: reserved ids print as the
/// placeholders normalization emits.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&id| id != CLS && id != PAD)
        .map(|&id| match SURFACE_FORMS.iter().find(|(_, i)| *i == id) {
            Some((s, _)) => *s,
            None => vocab.token(id).unwrap_or(RESERVED[UNK]),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone)]
pub struct TextBranchParams {
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub base: Vec<EncoderLayerParams>,
    pub refine: Vec<EncoderLayerParams>,
    pub max_len: usize,
}

impl TextBranchParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        init: &mut Initializer<'_>,
        vocab_size: usize,
        max_len: usize,
        d: usize,
        heads: usize,
        d_ff: usize,
        base_layers: usize,
        refine_layers: usize,
    ) -> Result<Self> {
        if base_layers == 0 {
            return Err(Error::Config("text branch needs at least one base layer".into()));
        }
        if max_len < 2 {
            return Err(Error::Config(format!("max_seq_len {max_len} is below 2")));
        }
        let token_emb = init.normal("text.token_emb", &[vocab_size, d], 0.1)?;
        let pos_emb = init.normal("text.pos_emb", &[max_len, d], 0.1)?;
        let base = (0..base_layers)
            .map(|i| EncoderLayerParams::init(init, &format!("text.base.{i}"), d, heads, d_ff))
            .collect::<Result<_>>()?;
        let refine = (0..refine_layers)
            .map(|i| EncoderLayerParams::init(init, &format!("text.refine.{i}"), d, heads, d_ff))
            .collect::<Result<_>>()?;
        Ok(Self {
            token_emb,
            pos_emb,
            base,
            refine,
            max_len,
        })
    }

    pub fn refine_param_ids(&self) -> Vec<ParamId> {
        self.refine.iter().flat_map(|l| l.param_ids()).collect()
    }
}

/// Token plus positional embeddings for `B` sequences of `max_len` ids:
/// `[B, max_len, d]`.
pub fn embed_tokens(ctx: &mut Ctx, params: &TextBranchParams, ids: &[usize]) -> Result<Var> {
    let n = params.max_len;
    if ids.is_empty() || !ids.len().is_multiple_of(n) {
        return Err(Error::Dimension(format!("{} token ids is not a multiple of max_len {n}", ids.len())));
    }
    let b = ids.len() / n;
    let (table, pos) = (ctx.p(params.token_emb), ctx.p(params.pos_emb));
    let tok = ctx.tape.embedding_lookup(table, ids)?;
    let d = ctx.tape.shape(tok)[1];
    let tok = ctx.tape.reshape(tok, &[b, n, d])?;
    ctx.tape.add_broadcast(tok, pos)
}

/// `[CLS]` hidden state `H[:, 0, :]` of a `[B, n, d]` sequence.
pub fn cls_pool(ctx: &mut Ctx, h: Var) -> Result<Var> {
    ctx.tape.select(h, 1, 0)
}

/// `h_T` for a batch: embeddings, the base stack, the refinement stack, then
/// the `[CLS]` row. Returns `[B, d]`.
pub fn encode_text(ctx: &mut Ctx, params: &TextBranchParams, ids: &[usize], mask: &AttentionMask) -> Result<Var> {
    let x = embed_tokens(ctx, params, ids)?;
    let h0 = encoder_stack(ctx, x, &params.base, mask)?;
    let h = encoder_stack(ctx, h0, &params.refine, mask)?;
    cls_pool(ctx, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{encoder_layer, ParamStore};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn vocab(words: &[&str]) -> Vocab {
        Vocab::from_tokens(RESERVED.iter().chain(words).map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn empty_text_is_just_cls() {
        let (ids, mask) = tokenize("", &vocab(&[]), 5);
        assert_eq!(ids, [1, 0, 0, 0, 0]);
        assert_eq!(mask, [true, false, false, false, false]);
    }

    #[test]
    fn placeholders_map_to_reserved_ids() {
        let (ids, mask) = tokenize("HTTPURL @USER", &vocab(&["cat"]), 6);
        assert_eq!(ids, [1, 3, 4, 0, 0, 0]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 3);
        assert_eq!(tokenize("EMOJI [CLS] [PAD] dog", &vocab(&["cat"]), 5).0, [1, 5, 2, 2, 2]);
    }

    #[test]
    fn truncates_to_max_len() {
        let (ids, mask) = tokenize("a b c d e", &vocab(&["a", "b"]), 3);
        assert_eq!(ids, [1, 6, 7]);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn corpus_vocab_fixture() {
        let corpus = ["the cat sat", "the dog sat down HTTPURL", "a cat and the dog"];
        let v = Vocab::build(corpus, 100).unwrap();
        // the:3, cat:2, dog:2, sat:2, then a, and, down once each.
        let want = ["the", "cat", "dog", "sat", "a", "and", "down"];
        for (i, w) in want.iter().enumerate() {
            assert_eq!(v.id(w), NUM_RESERVED + i, "{w}");
        }
        assert_eq!(v.len(), 13);
        let (ids, _) = tokenize("the dog and a bird", &v, 8);
        assert_eq!(ids, [1, 6, 8, 11, 10, 2, 0, 0]);

        let capped = Vocab::build(corpus, 8).unwrap();
        assert_eq!(capped.len(), 8);
        assert_eq!(capped.id("dog"), UNK);
    }

    #[test]
    fn vocab_text_round_trip_and_validation() {
        let v = Vocab::build(["x y y z"], 50).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("[PAD]\n[CLS]\n[UNK]\n[URL]\n[USER]\n[EMOJI]\ny\n"));
        assert_eq!(Vocab::parse(&text).unwrap(), v);
        assert!(Vocab::parse("[PAD]\n[CLS]\n").is_err());
        assert!(Vocab::parse(&format!("{text}y\n")).is_err());
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent_on_detokenized_stream(picks in proptest::collection::vec(0usize..9, 0..12)) {
            let v = vocab(&["sun", "rain", "fog"]);
            let max_len = 8;
            let words: Vec<usize> = picks.iter().map(|&p| p.clamp(2, 8)).collect();
            let text = detokenize(&words, &v);
            let (ids, mask) = tokenize(&text, &v, max_len);
            let again = tokenize(&detokenize(&ids, &v), &v, max_len);
            prop_assert_eq!(&again.0, &ids);
            prop_assert_eq!(again.1, mask);
        }
    }

    struct Fixture {
        store: ParamStore,
        params: TextBranchParams,
    }

    fn fixture(seed: u64, refine: usize) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let params = TextBranchParams::init(
            &mut Initializer {
                store: &mut store,
                rng: &mut rng,
            },
            20,
            6,
            8,
            2,
            16,
            1,
            refine,
        )
        .unwrap();
        Fixture { store, params }
    }

    fn batch() -> (Vec<usize>, AttentionMask) {
        let ids = vec![1, 7, 9, 3, 0, 0, 1, 12, 0, 0, 0, 0];
        let mask = AttentionMask::new(2, 6, ids.iter().enumerate().map(|(i, &t)| i % 6 == 0 || t != 0).collect()).unwrap();
        (ids, mask)
    }

    fn run(f: &Fixture, ids: &[usize], mask: &AttentionMask) -> Vec<f64> {
        let mut ctx = Ctx::eval(&f.store);
        let h = encode_text(&mut ctx, &f.params, ids, mask).unwrap();
        assert_eq!(ctx.tape.shape(h), &[2, 8]);
        ctx.tape.data(h).to_vec()
    }

    #[test]
    fn zero_refinement_is_base_cls_output() {
        let f = fixture(4, 0);
        let (ids, mask) = batch();
        let mut ctx = Ctx::eval(&f.store);
        let x = embed_tokens(&mut ctx, &f.params, &ids).unwrap();
        let h0 = encoder_stack(&mut ctx, x, &f.params.base, &mask).unwrap();
        let want = cls_pool(&mut ctx, h0).unwrap();
        assert_eq!(run(&f, &ids, &mask), ctx.tape.data(want));
    }

    #[test]
    fn one_refinement_layer_composes_with_base() {
        let (ids, mask) = batch();
        let f = fixture(4, 1);
        let got = run(&f, &ids, &mask);

        let mut ctx = Ctx::eval(&f.store);
        let x = embed_tokens(&mut ctx, &f.params, &ids).unwrap();
        let h0 = encoder_stack(&mut ctx, x, &f.params.base, &mask).unwrap();
        let base_cls = cls_pool(&mut ctx, h0).unwrap();
        let h = encoder_layer(&mut ctx, h0, &f.params.refine[0], &mask).unwrap();
        let want = cls_pool(&mut ctx, h).unwrap();
        assert_eq!(got, ctx.tape.data(want));
        assert_ne!(got, ctx.tape.data(base_cls));
    }

    #[test]
    fn out_of_vocab_id_is_a_contract_error() {
        let f = fixture(1, 0);
        let (mut ids, mask) = batch();
        ids[1] = 20;
        let mut ctx = Ctx::eval(&f.store);
        assert!(matches!(encode_text(&mut ctx, &f.params, &ids, &mask), Err(Error::Contract(_))));
    }

    #[test]
    fn refinement_layers_receive_gradients() {
        let f = fixture(6, 1);
        let (ids, mask) = batch();
        let mut ctx = Ctx::new(&f.store, Rng::new(1), true, 0.1);
        let h = encode_text(&mut ctx, &f.params, &ids, &mask).unwrap();
        let loss = crate::gradcheck::weighted_sum(&mut ctx.tape, h, 2).unwrap();
        ctx.tape.backward(loss).unwrap();
        let grads = ctx.param_grads();
        for id in f.params.refine_param_ids() {
            let g = grads[id.index()].as_ref().unwrap();
            assert!(g.iter().any(|&v| v != 0.0), "{}", f.store.name(id));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn pad_ids_never_affect_cls(seed in any::<u64>(), junk in proptest::collection::vec(0usize..20, 7)) {
            let f = fixture(seed, 1);
            let (ids, mask) = batch();
            let before = run(&f, &ids, &mask);
            let mut noisy = ids.clone();
            let pads: Vec<usize> = (0..ids.len()).filter(|&i| !mask.valid()[i]).collect();
            for (&i, &j) in pads.iter().zip(&junk) {
                noisy[i] = j;
            }
            prop_assert_eq!(before, run(&f, &noisy, &mask));
        }
    }
}
