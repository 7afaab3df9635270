//! Word-level tokenizer and the LoRA-adapted autoregressive decoder.
//!
//! A training or generation batch is one scene: the prompt tokens form a
//! shared prefix and every QA record is appended as its own segment. The
//! packed attention mask lets each segment see the prefix and its own
//! earlier tokens only, which is exactly equivalent to running the records
//! as separate sequences.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marker::MarkerIndexMap;
use crate::nn::{self, Block};
use crate::params::{normal_matrix, Ctx, ParamStore};
use crate::scene::{format_coord, template_words, Point};
use crate::tensor::{AttnMask, Scalar, Var};

pub use crate::metrics::GenerationRecord;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const MARKER_TOKENS: usize = 110;
pub const UNKNOWN_MARKER: &str = "<unk-marker>";
const PUNCTUATION: [char; 6] = ['(', ')', ',', '.', '?', ':'];

pub const BASE_PREFIX: &str = "dec.base";
pub const LORA_PREFIX: &str = "dec.lora";

/// Bijective token table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!(
                    "malformed vocabulary token {t:?}"
                )));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
        }
        for special in [PAD, BOS, EOS] {
            if !ids.contains_key(special) {
                return Err(Error::InvalidConfig(format!("vocabulary lacks {special}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    /// Specials, marker tokens, digits, punctuation, then template words.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = [PAD, BOS, EOS].iter().map(|s| s.to_string()).collect();
        tokens.extend((1..=MARKER_TOKENS).map(crate::marker::marker_token));
        tokens.extend((0..10).map(|d| d.to_string()));
        tokens.extend(PUNCTUATION.iter().map(|c| c.to_string()));
        tokens.extend(template_words());
        Vocab::from_tokens(tokens).expect("standard vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad(&self) -> usize {
        self.ids[PAD]
    }

    pub fn bos(&self) -> usize {
        self.ids[BOS]
    }

    pub fn eos(&self) -> usize {
        self.ids[EOS]
    }

    /// Marker index carried by `id`, if it is a `<mK>` token.
    pub fn marker_index(&self, id: usize) -> Option<usize> {
        parse_marker(self.token(id)?)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            let piece: String = if c == '<' {
                let end = chars[i..]
                    .iter()
                    .position(|&ch| ch == '>')
                    .map(|p| i + p + 1);
                match end {
                    Some(e) => chars[i..e].iter().collect(),
                    None => return Err(oov("character", "<")),
                }
            } else if c.is_ascii_alphabetic() {
                chars[i..]
                    .iter()
                    .take_while(|ch| ch.is_ascii_alphabetic())
                    .collect()
            } else if c.is_ascii_digit() || PUNCTUATION.contains(&c) {
                c.to_string()
            } else {
                return Err(oov("character", &c.to_string()));
            };
            i += piece.chars().count();
            let kind = if c == '<' {
                "token"
            } else if c.is_ascii_alphabetic() {
                "word"
            } else {
                "character"
            };
            out.push(self.id(&piece).ok_or_else(|| oov(kind, &piece))?);
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let pieces: Vec<&str> = ids
            .iter()
            .map(|&id| self.token(id).unwrap_or(UNKNOWN_MARKER))
            .collect();
        join_pieces(&pieces)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_tokens(body.lines().map(str::to_string).collect())
    }
}

fn oov(kind: &'static str, text: &str) -> Error {
    Error::OutOfVocabulary {
        kind,
        text: text.to_string(),
    }
}

fn parse_marker(tok: &str) -> Option<usize> {
    tok.strip_prefix("<m")?.strip_suffix('>')?.parse().ok()
}

fn is_digit_piece(p: &str) -> bool {
    p.len() == 1 && p.as_bytes()[0].is_ascii_digit()
}

/// Joins pieces with the canonical spacing of the QA templates: no space
/// before closing punctuation, after "(", or inside a number.
fn join_pieces(pieces: &[&str]) -> String {
    let mut out = String::new();
    for (i, &p) in pieces.iter().enumerate() {
        if i > 0 {
            let prev = pieces[i - 1];
            let in_number = is_digit_piece(p)
                && (is_digit_piece(prev)
                    || ((prev == "." || prev == ",") && i >= 2 && is_digit_piece(pieces[i - 2])));
            let glued = matches!(p, "," | "." | "?" | ")" | ":") || prev == "(" || in_number;
            if !glued {
                out.push(' ');
            }
        }
        out.push_str(p);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    /// Generation stops after this many answer tokens.
    pub max_answer_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            embed_dim: 64,
            depth: 2,
            heads: 4,
            max_seq_len: 512,
            lora_rank: 16,
            max_answer_len: 48,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "decoder embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0
            || self.lora_rank == 0
            || self.max_seq_len == 0
            || self.max_answer_len == 0
        {
            return Err(Error::InvalidConfig(
                "decoder depth, rank and length must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Output-head scale. The final norm is frozen at unit gain, so the head
/// must be wide enough for adapted states to reach near-one-hot outputs.
const HEAD_STD: f64 = 0.5;

/// Frozen base: token and position tables, blocks, final norm, head.
pub fn init_decoder<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    cfg: &DecoderConfig,
    vocab_size: usize,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    store.insert(
        format!("{BASE_PREFIX}.tok_emb"),
        normal_matrix(rng, vocab_size, d, 1.0),
        false,
    );
    store.insert(
        format!("{BASE_PREFIX}.pos_emb"),
        normal_matrix(rng, cfg.max_seq_len, d, 0.5),
        false,
    );
    for i in 0..cfg.depth {
        Block::init_base(store, rng, &format!("{BASE_PREFIX}.blocks.{i}"), d);
    }
    nn::init_layer_norm(store, &format!("{BASE_PREFIX}.ln_f"), d, false);
    store.insert(
        format!("{BASE_PREFIX}.head.weight"),
        normal_matrix(rng, d, vocab_size, HEAD_STD),
        false,
    );
    store.insert(
        format!("{BASE_PREFIX}.head.bias"),
        Array2::zeros((1, vocab_size)),
        false,
    );
    Ok(())
}

pub fn init_decoder_adapters<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    cfg: &DecoderConfig,
) {
    for i in 0..cfg.depth {
        Block::init_adapters(
            store,
            rng,
            &format!("{LORA_PREFIX}.blocks.{i}"),
            cfg.embed_dim,
            cfg.lora_rank,
        );
    }
}

/// A question and its (possibly partial) answer, as token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSegment {
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

impl TextSegment {
    /// `question <bos> answer`; the row after position `i` predicts `i+1`.
    fn ids(&self, vocab: &Vocab) -> Vec<usize> {
        let mut ids = self.question.clone();
        ids.push(vocab.bos());
        ids.extend(&self.answer);
        ids
    }
}

/// Row layout of a packed prefix-plus-segments sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packed {
    pub prompt_len: usize,
    pub text_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<u32>,
    /// First row of each segment in the full sequence.
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Packed {
    pub fn new(
        cfg: &DecoderConfig,
        vocab: &Vocab,
        prompt_len: usize,
        segs: &[TextSegment],
    ) -> Result<Self> {
        let mut p = Packed {
            prompt_len,
            text_ids: Vec::new(),
            positions: (0..prompt_len).collect(),
            segments: vec![0; prompt_len],
            starts: Vec::with_capacity(segs.len()),
            lens: Vec::with_capacity(segs.len()),
        };
        for (s, seg) in segs.iter().enumerate() {
            let ids = seg.ids(vocab);
            let len = prompt_len + ids.len();
            if len > cfg.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len,
                    max: cfg.max_seq_len,
                });
            }
            p.starts.push(prompt_len + p.text_ids.len());
            p.lens.push(ids.len());
            p.positions.extend(prompt_len..len);
            p.segments
                .extend(std::iter::repeat(s as u32 + 1).take(ids.len()));
            p.text_ids.extend(ids);
        }
        Ok(p)
    }

    pub fn total_len(&self) -> usize {
        self.prompt_len + self.text_ids.len()
    }

    /// Rows whose outputs predict answer tokens and the terminating EOS,
    /// paired with the target ids.
    pub fn answer_targets(&self, vocab: &Vocab, segs: &[TextSegment]) -> (Vec<usize>, Vec<usize>) {
        let (mut rows, mut targets) = (Vec::new(), Vec::new());
        for (s, seg) in segs.iter().enumerate() {
            let bos_row = self.starts[s] + seg.question.len();
            for (j, &t) in seg
                .answer
                .iter()
                .chain(std::iter::once(&vocab.eos()))
                .enumerate()
            {
                rows.push(bos_row + j);
                targets.push(t);
            }
        }
        (rows, targets)
    }

    /// Last row of each segment, which predicts its next token.
    pub fn last_rows(&self) -> Vec<usize> {
        self.starts
            .iter()
            .zip(&self.lens)
            .map(|(s, l)| s + l - 1)
            .collect()
    }
}

fn adapted<T: Scalar>(params: &ParamStore<T>) -> bool {
    params.contains(&format!("{LORA_PREFIX}.blocks.0.attn.q.down"))
}

/// Logits (`rows.len() x V`) at the selected rows of the packed sequence.
/// Adapters are used when present in the store.
pub fn forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &DecoderConfig,
    prompt: Var,
    packed: &Packed,
    rows: &[usize],
) -> Result<Var> {
    let prompt_dim = ctx.tape.value(prompt).dim();
    if prompt_dim.0 != packed.prompt_len || prompt_dim.1 != cfg.embed_dim {
        return Err(Error::Shape(format!(
            "prompt {prompt_dim:?} vs expected ({}, {})",
            packed.prompt_len, cfg.embed_dim
        )));
    }
    if packed.total_len() > 0 && packed.positions.iter().any(|&p| p >= cfg.max_seq_len) {
        return Err(Error::SequenceTooLong {
            len: packed.positions.iter().max().unwrap() + 1,
            max: cfg.max_seq_len,
        });
    }
    let use_lora = adapted(ctx.params);
    let tok = ctx.p(&format!("{BASE_PREFIX}.tok_emb"));
    let text = ctx.tape.gather_rows(tok, &packed.text_ids);
    let x = ctx.tape.concat_rows(&[prompt, text]);
    let pos_table = ctx.p(&format!("{BASE_PREFIX}.pos_emb"));
    let pos = ctx.tape.gather_rows(pos_table, &packed.positions);
    let mut h = ctx.tape.add(x, pos);
    let mask = AttnMask::Packed {
        segments: packed.segments.clone(),
    };
    for i in 0..cfg.depth {
        let block = Block {
            base: format!("{BASE_PREFIX}.blocks.{i}"),
            adapter: use_lora.then(|| format!("{LORA_PREFIX}.blocks.{i}")),
            heads: cfg.heads,
            rank: cfg.lora_rank,
        };
        h = block.forward(ctx, h, &mask);
    }
    let h = ctx.tape.gather_rows(h, rows);
    let h = nn::layer_norm(ctx, &format!("{BASE_PREFIX}.ln_f"), h);
    Ok(nn::linear(ctx, &format!("{BASE_PREFIX}.head"), h))
}

/// Mean cross-entropy over non-PAD targets.
pub fn loss<T: Scalar>(ctx: &mut Ctx<'_, T>, logits: Var, targets: &[usize], pad: usize) -> Var {
    let t: Vec<Option<usize>> = targets.iter().map(|&t| (t != pad).then_some(t)).collect();
    ctx.tape.cross_entropy(logits, &t)
}

/// Teacher-forced loss of a scene's records.
pub fn sequence_loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &DecoderConfig,
    vocab: &Vocab,
    prompt: Var,
    segs: &[TextSegment],
) -> Result<Var> {
    let prompt_len = ctx.tape.value(prompt).nrows();
    let packed = Packed::new(cfg, vocab, prompt_len, segs)?;
    let (rows, targets) = packed.answer_targets(vocab, segs);
    let logits = forward(ctx, cfg, prompt, &packed, &rows)?;
    Ok(loss(ctx, logits, &targets, vocab.pad()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub token_ids: Vec<usize>,
    pub text: String,
    pub referenced_indices: Vec<usize>,
    pub resolved_coords: Vec<Point>,
    /// Marker indices the map does not know.
    pub hallucinated: Vec<usize>,
}

impl GenerationResult {
    pub fn flags(&self) -> Vec<String> {
        self.hallucinated
            .iter()
            .map(|k| format!("unknown_marker:{k}"))
            .collect()
    }

    pub fn into_record(self, scene_id: &str, question: &str) -> GenerationRecord {
        GenerationRecord {
            scene_id: scene_id.to_string(),
            question: question.to_string(),
            flags: self.flags(),
            text: self.text,
            referenced_indices: self.referenced_indices,
            resolved_coords: self.resolved_coords,
        }
    }
}

/// Turns generated ids into text, replacing each `<mK>` by the coordinate
/// text of marker `K`. Unknown indices leave a sentinel and are reported.
pub fn resolve_output(
    vocab: &Vocab,
    ids: &[usize],
    map: Option<&MarkerIndexMap>,
) -> GenerationResult {
    let end = ids
        .iter()
        .position(|&t| t == vocab.eos())
        .unwrap_or(ids.len());
    let ids = &ids[..end];
    let mut pieces = Vec::with_capacity(ids.len());
    let mut res = GenerationResult {
        token_ids: ids.to_vec(),
        text: String::new(),
        referenced_indices: Vec::new(),
        resolved_coords: Vec::new(),
        hallucinated: Vec::new(),
    };
    for &id in ids {
        let tok = vocab.token(id).unwrap_or(UNKNOWN_MARKER);
        match (parse_marker(tok), map) {
            (Some(k), Some(map)) => match map.index_to_coords(k) {
                Ok(p) => {
                    res.referenced_indices.push(k);
                    res.resolved_coords.push(p);
                    pieces.push(format_coord(p));
                }
                Err(_) => {
                    res.hallucinated.push(k);
                    pieces.push(UNKNOWN_MARKER.to_string());
                }
            },
            (Some(k), None) => {
                res.hallucinated.push(k);
                pieces.push(UNKNOWN_MARKER.to_string());
            }
            (None, _) => pieces.push(tok.to_string()),
        }
    }
    let refs: Vec<&str> = pieces.iter().map(String::as_str).collect();
    res.text = join_pieces(&refs);
    res
}

/// Greedy decoding of several questions over one prompt in lockstep.
/// Stops each question at EOS, after `max_answer_len` tokens, or when the
/// sequence limit is reached.
pub fn generate_batch<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &DecoderConfig,
    vocab: &Vocab,
    prompt: &Array2<T>,
    questions: &[Vec<usize>],
    map: Option<&MarkerIndexMap>,
) -> Result<Vec<GenerationResult>> {
    let mut segs: Vec<TextSegment> = questions
        .iter()
        .map(|q| TextSegment {
            question: q.clone(),
            answer: Vec::new(),
        })
        .collect();
    let mut done = vec![false; segs.len()];
    // validates lengths before the first step
    Packed::new(cfg, vocab, prompt.nrows(), &segs)?;
    while done.iter().any(|d| !d) {
        let active: Vec<usize> = (0..segs.len()).filter(|&i| !done[i]).collect();
        let active_segs: Vec<TextSegment> = active.iter().map(|&i| segs[i].clone()).collect();
        let packed = Packed::new(cfg, vocab, prompt.nrows(), &active_segs)?;
        let mut ctx = Ctx::new(params);
        let p = ctx.tape.constant(prompt.clone());
        let logits = forward(&mut ctx, cfg, p, &packed, &packed.last_rows())?;
        let logits = ctx.tape.value(logits);
        for (row, &i) in active.iter().enumerate() {
            let next = argmax(logits.row(row));
            if next == vocab.eos() {
                done[i] = true;
                continue;
            }
            segs[i].answer.push(next);
            let len = prompt.nrows() + segs[i].question.len() + 1 + segs[i].answer.len();
            if segs[i].answer.len() >= cfg.max_answer_len || len >= cfg.max_seq_len {
                done[i] = true;
            }
        }
    }
    Ok(segs
        .iter()
        .map(|s| resolve_output(vocab, &s.answer, map))
        .collect())
}

/// Greedy decoding of a single question.
pub fn generate<T: Scalar>(
    params: &ParamStore<T>,
    cfg: &DecoderConfig,
    vocab: &Vocab,
    prompt: &Array2<T>,
    question: &[usize],
    map: Option<&MarkerIndexMap>,
) -> Result<GenerationResult> {
    Ok(generate_batch(params, cfg, vocab, prompt, &[question.to_vec()], map)?.remove(0))
}

/// First index of the maximum; NaN entries never win.
fn argmax<T: Scalar>(row: ndarray::ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] || row[best].is_nan() {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marker::build_index_map;
    use crate::scene::{generate_scene, Detection, Mask, ObjectClass, SceneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenizer_contracts() {
        let v = Vocab::standard();
        assert!(v.tokenize("").unwrap().is_empty());
        assert_eq!(v.detokenize(&[]), "");
        let ids = v.tokenize("<m3>").unwrap();
        assert_eq!(ids.len(), 1);
        assert_eq!(v.detokenize(&ids), "<m3>");
        assert_eq!(v.detokenize(&v.tokenize("yes").unwrap()), "yes");
        assert!(matches!(
            v.tokenize("yes!"),
            Err(Error::OutOfVocabulary { text, .. }) if text == "!"
        ));
        assert!(v.tokenize("zebra").is_err());
        assert!(v.tokenize("<m111>").is_err());
    }

    #[test]
    fn generated_text_round_trips() {
        let v = Vocab::standard();
        let cfg = SceneConfig::default();
        for seed in 0..20 {
            let scene = generate_scene(&cfg, seed).unwrap();
            for qa in &scene.qa {
                for text in [&qa.question, &qa.answer] {
                    let ids = v.tokenize(text).unwrap();
                    assert_eq!(&v.detokenize(&ids), text);
                }
            }
        }
        let t = "The red car is at <m2>. There are 12 objects.";
        assert_eq!(v.detokenize(&v.tokenize(t).unwrap()), t);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::standard();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        assert!(Vocab::from_tokens(vec![
            PAD.into(),
            BOS.into(),
            EOS.into(),
            "a".into(),
            "a".into()
        ])
        .is_err());
    }

    fn small_map() -> MarkerIndexMap {
        let dets: Vec<Detection> = [(10usize, 10usize), (100, 50), (200, 200)]
            .iter()
            .map(|&(x, y)| Detection {
                object_id: 0,
                class_label: ObjectClass::Car,
                view: 0,
                mask: Mask::from_points(448, 448, [(x, y)]),
            })
            .collect();
        build_index_map(&dets).unwrap().0
    }

    #[test]
    fn marker_substitution() {
        let v = Vocab::standard();
        let map = small_map();
        let r = resolve_output(&v, &[v.id("<m2>").unwrap(), v.eos()], Some(&map));
        assert_eq!(r.text, "(100.0,50.0)");
        assert_eq!(r.referenced_indices, vec![2]);
        assert_eq!(r.resolved_coords, vec![Point::new(100.0, 50.0)]);

        let r = resolve_output(&v, &v.tokenize("yes").unwrap(), Some(&map));
        assert_eq!(r.text, "yes");
        assert!(r.resolved_coords.is_empty());

        let r = resolve_output(&v, &[v.id("<m99>").unwrap()], Some(&map));
        assert_eq!(r.text, UNKNOWN_MARKER);
        assert_eq!(r.hallucinated, vec![99]);
        assert_eq!(r.flags(), vec!["unknown_marker:99".to_string()]);

        let ids = v.tokenize("The red car is at <m3>.").unwrap();
        assert_eq!(
            resolve_output(&v, &ids, Some(&map)).text,
            "The red car is at (200.0,200.0)."
        );
    }

    fn tiny_cfg() -> DecoderConfig {
        DecoderConfig {
            embed_dim: 8,
            depth: 1,
            heads: 2,
            max_seq_len: 40,
            lora_rank: 2,
            ..DecoderConfig::default()
        }
    }

    fn tiny_store(cfg: &DecoderConfig, vocab: &Vocab, lora: bool) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        init_decoder(&mut s, &mut rng, cfg, vocab.len()).unwrap();
        if lora {
            init_decoder_adapters(&mut s, &mut rng, cfg);
        }
        s
    }

    fn logits_for(
        s: &ParamStore<f64>,
        cfg: &DecoderConfig,
        v: &Vocab,
        prompt: &Array2<f64>,
        segs: &[TextSegment],
    ) -> Array2<f64> {
        let packed = Packed::new(cfg, v, prompt.nrows(), segs).unwrap();
        let rows: Vec<usize> = (0..packed.total_len()).collect();
        let mut ctx = Ctx::new(s);
        let p = ctx.tape.constant(prompt.clone());
        let l = forward(&mut ctx, cfg, p, &packed, &rows).unwrap();
        ctx.tape.value(l).clone()
    }

    #[test]
    fn lora_identity_at_init() {
        let v = Vocab::standard();
        let cfg = tiny_cfg();
        let prompt = normal_matrix(&mut ChaCha8Rng::seed_from_u64(1), 4, 8, 1.0);
        let segs = vec![TextSegment {
            question: v.tokenize("Is there a red car?").unwrap(),
            answer: v.tokenize("yes").unwrap(),
        }];
        let plain = logits_for(&tiny_store(&cfg, &v, false), &cfg, &v, &prompt, &segs);
        let lora = logits_for(&tiny_store(&cfg, &v, true), &cfg, &v, &prompt, &segs);
        assert_eq!(plain, lora);
    }

    #[test]
    fn packed_segments_match_separate_runs() {
        let v = Vocab::standard();
        let cfg = tiny_cfg();
        let s = tiny_store(&cfg, &v, true);
        let prompt = normal_matrix(&mut ChaCha8Rng::seed_from_u64(2), 3, 8, 1.0);
        let a = TextSegment {
            question: v.tokenize("Is there a red car?").unwrap(),
            answer: v.tokenize("no").unwrap(),
        };
        let b = TextSegment {
            question: v.tokenize("Describe the scene.").unwrap(),
            answer: v.tokenize("There are 3 objects.").unwrap(),
        };
        let both = logits_for(&s, &cfg, &v, &prompt, &[a.clone(), b.clone()]);
        let only_a = logits_for(&s, &cfg, &v, &prompt, &[a.clone()]);
        let only_b = logits_for(&s, &cfg, &v, &prompt, &[b.clone()]);
        let la = only_a.nrows() - 3;
        let diff_a = (&both.slice(ndarray::s![3..3 + la, ..])
            - &only_a.slice(ndarray::s![3.., ..]))
            .mapv(f64::abs);
        let diff_b = (&both.slice(ndarray::s![3 + la.., ..]) - &only_b.slice(ndarray::s![3.., ..]))
            .mapv(f64::abs);
        assert!(diff_a.iter().chain(diff_b.iter()).all(|&d| d < 1e-10));
    }

    #[test]
    fn overflow_is_rejected() {
        let v = Vocab::standard();
        let cfg = tiny_cfg();
        let segs = vec![TextSegment {
            question: vec![v.id("yes").unwrap(); 30],
            answer: vec![v.id("no").unwrap(); 10],
        }];
        assert!(matches!(
            Packed::new(&cfg, &v, 4, &segs),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn loss_fixtures() {
        let mut s = ParamStore::<f64>::new();
        s.insert("x", Array2::zeros((1, 1)), false);
        // uniform logits give ln V
        let mut ctx = Ctx::new(&s);
        let l = ctx.tape.constant(Array2::zeros((2, 7)));
        let out = loss(&mut ctx, l, &[3, 0], 99);
        assert!((ctx.tape.value(out)[[0, 0]] - 7f64.ln()).abs() < 1e-12);
        // near one-hot logits give ~0
        let mut ctx = Ctx::new(&s);
        let mut big = Array2::zeros((1, 5));
        big[[0, 2]] = 1e3;
        let l = ctx.tape.constant(big);
        let out = loss(&mut ctx, l, &[2], 99);
        assert!(ctx.tape.value(out)[[0, 0]].abs() < 1e-12);
        // PAD targets are ignored
        let mut ctx = Ctx::new(&s);
        let l = ctx
            .tape
            .constant(Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 5.0, -5.0]).unwrap());
        let out = loss(&mut ctx, l, &[1, 0], 0);
        assert!((ctx.tape.value(out)[[0, 0]] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy_is_deterministic() {
        let v = Vocab::standard();
        let cfg = tiny_cfg();
        let s = tiny_store(&cfg, &v, true);
        let prompt = normal_matrix(&mut ChaCha8Rng::seed_from_u64(3), 4, 8, 1.0);
        let qs = vec![
            v.tokenize("Is there a red car?").unwrap(),
            v.tokenize("Describe the scene.").unwrap(),
        ];
        let map = small_map();
        let a = generate_batch(&s, &cfg, &v, &prompt, &qs, Some(&map)).unwrap();
        let b = generate_batch(&s, &cfg, &v, &prompt, &qs, Some(&map)).unwrap();
        assert_eq!(a, b);
        for r in &a {
            for (k, p) in r.referenced_indices.iter().zip(&r.resolved_coords) {
                assert_eq!(map.index_to_coords(*k).unwrap(), *p);
            }
        }
        let single = generate(&s, &cfg, &v, &prompt, &qs[1], Some(&map)).unwrap();
        assert_eq!(single, a[1]);
    }
}
