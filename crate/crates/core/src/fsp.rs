//! Self-pretraining sequence builders.
//!
//! Three token-level masking objectives turn an OCR'd document (tokens with
//! normalized boxes) into an input/target sequence pair:
//!
//! * text modeling (TM): masked text is replaced by `<text_l>` plus the four
//!   location tokens of its box; the target lists `<text_l> t_m`.
//! * layout modeling (LM): masked tokens are wrapped in
//!   `<layout_l> t_m </layout_l>`; the target lists `<layout_l>` plus the
//!   four location tokens.
//! * text-layout modeling (TLM): masked tokens become `<text_layout_l>`; the
//!   target lists `<text_layout_l> t_m` plus the four location tokens.
//!
//! Sentinel tokens always carry the zero box. Location tokens are ordered
//! `(x0, y0, x1, y1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LOC_VOCAB: usize = 500;
pub const DEFAULT_MAX_MASKED: usize = 100;
pub const ZERO_BOX: [f64; 4] = [0.0; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Tm,
    Lm,
    Tlm,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Tm, Objective::Lm, Objective::Tlm];

    /// Default masking probability.
    pub fn default_mask_prob(self) -> f64 {
        match self {
            Objective::Tm => 0.5,
            Objective::Lm => 0.75,
            Objective::Tlm => 0.15,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Tm => "tm",
            Objective::Lm => "lm",
            Objective::Tlm => "tlm",
        }
    }

    /// Parses a comma-separated list such as `tm,lm,tlm`.
    pub fn parse_list(s: &str) -> Result<Vec<Objective>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let o: Objective = part.parse()?;
            if !out.contains(&o) {
                out.push(o);
            }
        }
        out.sort();
        Ok(out)
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tm" => Ok(Objective::Tm),
            "lm" => Ok(Objective::Lm),
            "tlm" => Ok(Objective::Tlm),
            other => Err(Error::Usage(format!("unknown pretraining objective {other:?}"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Tokens with normalized `(x0, y0, x1, y1)` boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentExample {
    pub tokens: Vec<String>,
    pub boxes: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl DocumentExample {
    pub fn new(tokens: Vec<String>, boxes: Vec<[f64; 4]>) -> Result<Self> {
        let ex = DocumentExample {
            tokens,
            boxes,
            image_ref: None,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.boxes.len() {
            return Err(Error::structural(format!(
                "{} tokens but {} boxes",
                self.tokens.len(),
                self.boxes.len()
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let in_range = b.iter().all(|c| (0.0..=1.0).contains(c));
            if !in_range || b[0] > b[2] || b[1] > b[3] {
                return Err(Error::structural(format!("box {i} is malformed: {b:?}")));
            }
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if Sentinel::parse(t).is_some() {
                return Err(Error::structural(format!("token {i} ({t:?}) collides with a sentinel")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub objective: Objective,
    /// Masked token indices, strictly ascending.
    pub indices: Vec<usize>,
    pub mask_prob: f64,
    pub max_masked: usize,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn validate(&self, objective: Objective, tokens: usize) -> Result<()> {
        if self.objective != objective {
            return Err(Error::structural(format!(
                "plan for {} used to build {}",
                self.objective, objective
            )));
        }
        if self.indices.len() > self.max_masked {
            return Err(Error::structural(format!(
                "{} masked indices exceed the cap {}",
                self.indices.len(),
                self.max_masked
            )));
        }
        let ascending = self.indices.windows(2).all(|w| w[0] < w[1]);
        let in_range = self.indices.last().is_none_or(|&i| i < tokens);
        if !ascending || !in_range {
            return Err(Error::structural("mask indices must be distinct, ascending and in range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePair {
    pub input: Vec<String>,
    pub target: Vec<String>,
    pub input_boxes: Vec<[f64; 4]>,
}

impl SequencePair {
    /// `input TAB target`, tokens joined by single spaces.
    pub fn to_tsv_line(&self) -> String {
        format!("{}\t{}", self.input.join(" "), self.target.join(" "))
    }
}

/// Maps normalized coordinates to `vocab` location bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discretizer {
    pub vocab: usize,
}

impl Default for Discretizer {
    fn default() -> Self {
        Discretizer {
            vocab: DEFAULT_LOC_VOCAB,
        }
    }
}

impl Discretizer {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::domain("location vocabulary must be non-empty"));
        }
        Ok(Discretizer { vocab })
    }

    pub fn bin(&self, c: f64) -> Result<usize> {
        discretize(c, self.vocab)
    }

    pub fn bin_center(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) / self.vocab as f64
    }

    fn loc_tokens(&self, b: &[f64; 4]) -> Result<[String; 4]> {
        Ok([
            Sentinel::Loc(self.bin(b[0])?).to_string(),
            Sentinel::Loc(self.bin(b[1])?).to_string(),
            Sentinel::Loc(self.bin(b[2])?).to_string(),
            Sentinel::Loc(self.bin(b[3])?).to_string(),
        ])
    }
}

/// `min(floor(c * vocab), vocab - 1)` for `c` in `[0, 1]`.
pub fn discretize(c: f64, vocab: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::domain(format!("coordinate {c} outside [0, 1]")));
    }
    if vocab == 0 {
        return Err(Error::domain("location vocabulary must be non-empty"));
    }
    Ok(((c * vocab as f64).floor() as usize).min(vocab - 1))
}

/// Special tokens of the sequence grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sentinel {
    Text(usize),
    Layout(usize),
    LayoutEnd(usize),
    TextLayout(usize),
    Loc(usize),
}

impl Sentinel {
    pub fn parse(token: &str) -> Option<Sentinel> {
        let inner = token.strip_prefix('<')?.strip_suffix('>')?;
        let (head, num) = inner.rsplit_once('_')?;
        if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let n: usize = num.parse().ok()?;
        match head {
            "text" => Some(Sentinel::Text(n)),
            "layout" => Some(Sentinel::Layout(n)),
            "/layout" => Some(Sentinel::LayoutEnd(n)),
            "text_layout" => Some(Sentinel::TextLayout(n)),
            "loc" => Some(Sentinel::Loc(n)),
            _ => None,
        }
    }
}

impl std::fmt::Display for Sentinel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sentinel::Text(l) => write!(f, "<text_{l}>"),
            Sentinel::Layout(l) => write!(f, "<layout_{l}>"),
            Sentinel::LayoutEnd(l) => write!(f, "</layout_{l}>"),
            Sentinel::TextLayout(l) => write!(f, "<text_layout_{l}>"),
            Sentinel::Loc(b) => write!(f, "<loc_{b}>"),
        }
    }
}

/// Includes each of `j` indices independently with probability `mask_prob`,
/// then keeps the first `max_masked` in reading order.
pub fn sample_mask<R: Rng + ?Sized>(
    objective: Objective,
    j: usize,
    mask_prob: f64,
    max_masked: usize,
    rng: &mut R,
) -> Result<MaskPlan> {
    if j == 0 {
        return Err(Error::domain("cannot mask an empty document"));
    }
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::domain(format!("mask probability {mask_prob} outside [0, 1]")));
    }
    let mut indices: Vec<usize> = (0..j).filter(|_| rng.random::<f64>() < mask_prob).collect();
    indices.truncate(max_masked);
    Ok(MaskPlan {
        objective,
        indices,
        mask_prob,
        max_masked,
    })
}

/// `sample_mask` with the objective's default probability and cap.
pub fn sample_default_mask<R: Rng + ?Sized>(objective: Objective, j: usize, rng: &mut R) -> Result<MaskPlan> {
    sample_mask(objective, j, objective.default_mask_prob(), DEFAULT_MAX_MASKED, rng)
}

pub fn build(example: &DocumentExample, plan: &MaskPlan, disc: &Discretizer) -> Result<SequencePair> {
    match plan.objective {
        Objective::Tm => build_tm(example, plan, disc),
        Objective::Lm => build_lm(example, plan, disc),
        Objective::Tlm => build_tlm(example, plan, disc),
    }
}

/// Shared walk over the document: unmasked tokens pass through, masked ones
/// are handed to `masked(l, token, box, pair)`.
fn compile(
    example: &DocumentExample,
    plan: &MaskPlan,
    objective: Objective,
    mut masked: impl FnMut(usize, &str, &[f64; 4], &mut SequencePair) -> Result<()>,
) -> Result<SequencePair> {
    example.validate()?;
    plan.validate(objective, example.len())?;
    let mut pair = SequencePair {
        input: Vec::with_capacity(example.len() + 4 * plan.len()),
        target: Vec::new(),
        input_boxes: Vec::with_capacity(example.len() + 4 * plan.len()),
    };
    let mut next = plan.indices.iter().peekable();
    let mut l = 0;
    for (i, (tok, b)) in example.tokens.iter().zip(&example.boxes).enumerate() {
        if next.peek() == Some(&&i) {
            next.next();
            masked(l, tok, b, &mut pair)?;
            l += 1;
        } else {
            pair.input.push(tok.clone());
            pair.input_boxes.push(*b);
        }
    }
    Ok(pair)
}

fn push_sentinel(pair: &mut SequencePair, s: Sentinel) {
    pair.input.push(s.to_string());
    pair.input_boxes.push(ZERO_BOX);
}

pub fn build_tm(example: &DocumentExample, plan: &MaskPlan, disc: &Discretizer) -> Result<SequencePair> {
    compile(example, plan, Objective::Tm, |l, tok, b, pair| {
        push_sentinel(pair, Sentinel::Text(l));
        for loc in disc.loc_tokens(b)? {
            pair.input.push(loc);
            pair.input_boxes.push(ZERO_BOX);
        }
        pair.target.push(Sentinel::Text(l).to_string());
        pair.target.push(tok.to_string());
        Ok(())
    })
}

pub fn build_lm(example: &DocumentExample, plan: &MaskPlan, disc: &Discretizer) -> Result<SequencePair> {
    compile(example, plan, Objective::Lm, |l, tok, b, pair| {
        push_sentinel(pair, Sentinel::Layout(l));
        pair.input.push(tok.to_string());
        pair.input_boxes.push(*b);
        push_sentinel(pair, Sentinel::LayoutEnd(l));
        pair.target.push(Sentinel::Layout(l).to_string());
        pair.target.extend(disc.loc_tokens(b)?);
        Ok(())
    })
}

pub fn build_tlm(example: &DocumentExample, plan: &MaskPlan, disc: &Discretizer) -> Result<SequencePair> {
    compile(example, plan, Objective::Tlm, |l, tok, b, pair| {
        push_sentinel(pair, Sentinel::TextLayout(l));
        pair.target.push(Sentinel::TextLayout(l).to_string());
        pair.target.push(tok.to_string());
        pair.target.extend(disc.loc_tokens(b)?);
        Ok(())
    })
}

/// A masked position recovered from a pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSlot {
    /// Index in the reconstructed token sequence.
    pub index: usize,
    pub bins: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    /// Masked boxes are replaced by their bin centers.
    pub example: DocumentExample,
    pub masked: Vec<MaskedSlot>,
}

struct Cursor<'a> {
    tokens: &'a [String],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(tokens: &'a [String], what: &'static str) -> Self {
        Cursor { tokens, pos: 0, what }
    }

    fn done(&self) -> bool {
        self.pos >= self.tokens.len()
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::parse(self.pos, format!("{}: {msg}", self.what))
    }

    fn next(&mut self) -> Result<&'a str> {
        let t = self.tokens.get(self.pos).ok_or_else(|| self.err("unexpected end of sequence"))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: Sentinel) -> Result<()> {
        let at = self.pos;
        let t = self.next()?;
        if Sentinel::parse(t) != Some(want) {
            return Err(Error::parse(at, format!("{}: expected {want}, found {t:?}", self.what)));
        }
        Ok(())
    }

    fn natural(&mut self) -> Result<&'a str> {
        let at = self.pos;
        let t = self.next()?;
        if Sentinel::parse(t).is_some() {
            return Err(Error::parse(at, format!("{}: expected a text token, found {t:?}", self.what)));
        }
        Ok(t)
    }

    fn locs(&mut self, vocab: usize) -> Result<[usize; 4]> {
        let mut bins = [0; 4];
        for b in bins.iter_mut() {
            let at = self.pos;
            let t = self.next()?;
            match Sentinel::parse(t) {
                Some(Sentinel::Loc(v)) if v < vocab => *b = v,
                _ => {
                    return Err(Error::parse(at, format!("{}: expected a location token, found {t:?}", self.what)))
                }
            }
        }
        Ok(bins)
    }
}

/// Inverts a builder: recovers the token sequence exactly and each masked box
/// up to bin resolution.
pub fn reconstruct(pair: &SequencePair, objective: Objective, disc: &Discretizer) -> Result<Reconstruction> {
    if pair.input.len() != pair.input_boxes.len() {
        return Err(Error::structural("input and input_boxes differ in length"));
    }
    let mut input = Cursor::new(&pair.input, "input");
    let mut target = Cursor::new(&pair.target, "target");
    let mut tokens = Vec::new();
    let mut boxes = Vec::new();
    let mut masked = Vec::new();
    let mut l = 0;
    let center = |bins: [usize; 4]| bins.map(|b| disc.bin_center(b));

    while !input.done() {
        let at = input.pos;
        let tok = input.next()?;
        let Some(sentinel) = Sentinel::parse(tok) else {
            tokens.push(tok.to_string());
            boxes.push(pair.input_boxes[at]);
            continue;
        };
        if pair.input_boxes[at] != ZERO_BOX {
            return Err(Error::parse(at, "input: sentinel with a non-zero box"));
        }
        let bins = match (objective, sentinel) {
            (Objective::Tm, Sentinel::Text(k)) if k == l => {
                let bins = input.locs(disc.vocab)?;
                target.expect(Sentinel::Text(l))?;
                tokens.push(target.natural()?.to_string());
                bins
            }
            (Objective::Lm, Sentinel::Layout(k)) if k == l => {
                tokens.push(input.natural()?.to_string());
                input.expect(Sentinel::LayoutEnd(l))?;
                target.expect(Sentinel::Layout(l))?;
                target.locs(disc.vocab)?
            }
            (Objective::Tlm, Sentinel::TextLayout(k)) if k == l => {
                target.expect(Sentinel::TextLayout(l))?;
                tokens.push(target.natural()?.to_string());
                target.locs(disc.vocab)?
            }
            _ => {
                return Err(Error::parse(
                    at,
                    format!("input: unexpected {tok:?} (expected masked slot {l} of {objective})"),
                ))
            }
        };
        boxes.push(center(bins));
        masked.push(MaskedSlot {
            index: tokens.len() - 1,
            bins,
        });
        l += 1;
    }
    if !target.done() {
        return Err(target.err("trailing tokens after the last masked slot"));
    }
    Ok(Reconstruction {
        example: DocumentExample {
            tokens,
            boxes,
            image_ref: None,
        },
        masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{stream, Purpose};
    use proptest::prelude::*;

    fn revenue() -> DocumentExample {
        DocumentExample::new(vec!["Revenue".into()], vec![[0.10, 0.20, 0.30, 0.25]]).unwrap()
    }

    fn plan(objective: Objective, indices: Vec<usize>) -> MaskPlan {
        MaskPlan {
            objective,
            indices,
            mask_prob: 1.0,
            max_masked: 100,
        }
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    const V100: Discretizer = Discretizer { vocab: 100 };

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize(0.0, 100).unwrap(), 0);
        assert_eq!(discretize(1.0, 100).unwrap(), 99);
        assert_eq!(discretize(0.25, 100).unwrap(), 25);
        assert!(matches!(discretize(1.01, 100), Err(Error::Domain(_))));
        assert!(matches!(discretize(-0.1, 100), Err(Error::Domain(_))));
        assert!(discretize(f64::NAN, 100).is_err());
    }

    #[test]
    fn mask_sampling_examples() {
        let mut rng = stream(0, Purpose::Masking, &[]);
        assert!(sample_mask(Objective::Tm, 10, 0.0, 100, &mut rng).unwrap().is_empty());
        assert_eq!(sample_mask(Objective::Tm, 5, 1.0, 100, &mut rng).unwrap().indices, vec![0, 1, 2, 3, 4]);
        let p = sample_mask(Objective::Tm, 150, 1.0, 100, &mut rng).unwrap();
        assert_eq!(p.indices, (0..100).collect::<Vec<_>>());
        assert!(sample_mask(Objective::Tm, 0, 0.5, 100, &mut rng).is_err());
    }

    #[test]
    fn tm_revenue() {
        let pair = build_tm(&revenue(), &plan(Objective::Tm, vec![0]), &V100).unwrap();
        assert_eq!(pair.input, s(&["<text_0>", "<loc_10>", "<loc_20>", "<loc_30>", "<loc_25>"]));
        assert_eq!(pair.target, s(&["<text_0>", "Revenue"]));
        assert!(pair.input_boxes.iter().all(|b| *b == ZERO_BOX));
    }

    #[test]
    fn lm_revenue() {
        let pair = build_lm(&revenue(), &plan(Objective::Lm, vec![0]), &V100).unwrap();
        assert_eq!(pair.input, s(&["<layout_0>", "Revenue", "</layout_0>"]));
        assert_eq!(pair.input_boxes[1], [0.10, 0.20, 0.30, 0.25]);
        assert_eq!(pair.input_boxes[0], ZERO_BOX);
        assert_eq!(pair.target, s(&["<layout_0>", "<loc_10>", "<loc_20>", "<loc_30>", "<loc_25>"]));
    }

    #[test]
    fn tlm_revenue_and_inverse() {
        let pair = build_tlm(&revenue(), &plan(Objective::Tlm, vec![0]), &V100).unwrap();
        assert_eq!(pair.input, s(&["<text_layout_0>"]));
        assert_eq!(pair.input_boxes, vec![ZERO_BOX]);
        assert_eq!(
            pair.target,
            s(&["<text_layout_0>", "Revenue", "<loc_10>", "<loc_20>", "<loc_30>", "<loc_25>"])
        );
        let r = reconstruct(&pair, Objective::Tlm, &V100).unwrap();
        assert_eq!(r.example.tokens, s(&["Revenue"]));
        assert_eq!(r.masked, vec![MaskedSlot { index: 0, bins: [10, 20, 30, 25] }]);
    }

    fn three() -> DocumentExample {
        DocumentExample::new(
            s(&["a", "b", "c"]),
            vec![[0.0, 0.0, 0.1, 0.1], [0.2, 0.2, 0.3, 0.3], [0.5, 0.5, 1.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn empty_mask_passes_through() {
        let ex = three();
        for o in Objective::ALL {
            let pair = build(&ex, &plan(o, vec![]), &V100).unwrap();
            assert_eq!(pair.input, ex.tokens);
            assert_eq!(pair.input_boxes, ex.boxes);
            assert!(pair.target.is_empty());
            let r = reconstruct(&pair, o, &V100).unwrap();
            assert_eq!(r.example, ex);
        }
    }

    #[test]
    fn sentinels_in_reading_order() {
        let pair = build_tm(&three(), &plan(Objective::Tm, vec![0, 2]), &V100).unwrap();
        let sentinels: Vec<&String> = pair.input.iter().filter(|t| t.starts_with("<text_")).collect();
        assert_eq!(sentinels, vec!["<text_0>", "<text_1>"]);
        assert_eq!(pair.target, s(&["<text_0>", "a", "<text_1>", "c"]));
    }

    #[test]
    fn lm_full_mask_lengths() {
        let pair = build_lm(&three(), &plan(Objective::Lm, vec![0, 1, 2]), &V100).unwrap();
        assert_eq!(pair.input.len(), 9);
        assert_eq!(pair.target.len(), 15);
    }

    #[test]
    fn tlm_full_mask_has_only_sentinels() {
        let ex = DocumentExample::new(
            (0..10).map(|i| format!("w{i}")).collect(),
            vec![[0.1, 0.1, 0.2, 0.2]; 10],
        )
        .unwrap();
        let mut rng = stream(1, Purpose::Masking, &[]);
        let p = sample_mask(Objective::Tlm, 10, 1.0, 100, &mut rng).unwrap();
        let pair = build_tlm(&ex, &p, &V100).unwrap();
        assert_eq!(pair.input.len(), 10);
        assert!(pair.input.iter().all(|t| Sentinel::parse(t).is_some()));
    }

    #[test]
    fn malformed_plans_rejected() {
        let ex = three();
        assert!(matches!(build_tm(&ex, &plan(Objective::Lm, vec![0]), &V100), Err(Error::Structural(_))));
        assert!(matches!(build_tm(&ex, &plan(Objective::Tm, vec![1, 0]), &V100), Err(Error::Structural(_))));
        assert!(matches!(build_tm(&ex, &plan(Objective::Tm, vec![3]), &V100), Err(Error::Structural(_))));
        let mut p = plan(Objective::Tm, vec![0, 1]);
        p.max_masked = 1;
        assert!(build_tm(&ex, &p, &V100).is_err());
    }

    #[test]
    fn malformed_documents_rejected() {
        assert!(DocumentExample::new(s(&["a"]), vec![]).is_err());
        assert!(DocumentExample::new(s(&["a"]), vec![[0.5, 0.0, 0.4, 0.1]]).is_err());
        assert!(DocumentExample::new(s(&["a"]), vec![[0.0, 0.0, 1.1, 0.1]]).is_err());
        assert!(DocumentExample::new(s(&["<loc_3>"]), vec![[0.0; 4]]).is_err());
    }

    #[test]
    fn out_of_order_sentinel_is_a_parse_error() {
        let pair = SequencePair {
            input: s(&["<text_1>", "<loc_1>", "<loc_1>", "<loc_2>", "<loc_2>", "<text_0>", "<loc_1>", "<loc_1>", "<loc_2>", "<loc_2>"]),
            target: s(&["<text_1>", "a", "<text_0>", "b"]),
            input_boxes: vec![ZERO_BOX; 10],
        };
        assert!(matches!(reconstruct(&pair, Objective::Tm, &V100), Err(Error::Parse { position: 0, .. })));
    }

    #[test]
    fn missing_loc_quad_is_a_parse_error() {
        let pair = SequencePair {
            input: s(&["<text_0>", "<loc_1>", "<loc_1>", "x"]),
            target: s(&["<text_0>", "a"]),
            input_boxes: vec![ZERO_BOX; 4],
        };
        assert!(matches!(reconstruct(&pair, Objective::Tm, &V100), Err(Error::Parse { position: 3, .. })));
        let pair = SequencePair {
            input: s(&["<text_layout_0>"]),
            target: s(&["<text_layout_0>", "a", "<loc_1>"]),
            input_boxes: vec![ZERO_BOX],
        };
        assert!(reconstruct(&pair, Objective::Tlm, &V100).is_err());
    }

    #[test]
    fn sentinel_surface_forms() {
        assert_eq!(Sentinel::Text(0).to_string(), "<text_0>");
        assert_eq!(Sentinel::Layout(0).to_string(), "<layout_0>");
        assert_eq!(Sentinel::LayoutEnd(0).to_string(), "</layout_0>");
        assert_eq!(Sentinel::TextLayout(0).to_string(), "<text_layout_0>");
        assert_eq!(Sentinel::Loc(17).to_string(), "<loc_17>");
        assert_eq!(Sentinel::parse("<text_layout_12>"), Some(Sentinel::TextLayout(12)));
        assert_eq!(Sentinel::parse("<loc_>"), None);
        assert_eq!(Sentinel::parse("<foo_1>"), None);
    }

    #[test]
    fn objective_lists() {
        assert_eq!(Objective::parse_list("tlm,tm").unwrap(), vec![Objective::Tm, Objective::Tlm]);
        assert!(Objective::parse_list("tm,xx").is_err());
    }

    fn arb_example() -> impl Strategy<Value = DocumentExample> {
        prop::collection::vec(("[a-z]{1,6}", 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0), 1..40)
            .prop_map(|items| {
                let tokens = items.iter().map(|t| t.0.clone()).collect();
                let boxes = items
                    .iter()
                    .map(|&(_, a, b, c, d)| [a.min(c), b.min(d), a.max(c), b.max(d)])
                    .collect();
                DocumentExample::new(tokens, boxes).unwrap()
            })
    }

    proptest! {
        #[test]
        fn round_trip(ex in arb_example(), seed in any::<u64>(), vocab in 1usize..600) {
            let disc = Discretizer::new(vocab).unwrap();
            for o in Objective::ALL {
                let mut rng = stream(seed, Purpose::Masking, &[]);
                let p = sample_default_mask(o, ex.len(), &mut rng).unwrap();
                let pair = build(&ex, &p, &disc).unwrap();
                for (t, b) in pair.input.iter().zip(&pair.input_boxes) {
                    if Sentinel::parse(t).is_some() {
                        prop_assert_eq!(*b, ZERO_BOX);
                    }
                }
                let r = reconstruct(&pair, o, &disc).unwrap();
                prop_assert_eq!(&r.example.tokens, &ex.tokens);
                prop_assert_eq!(r.masked.iter().map(|m| m.index).collect::<Vec<_>>(), p.indices.clone());
                for (got, want) in r.example.boxes.iter().zip(&ex.boxes) {
                    for c in 0..4 {
                        prop_assert!((got[c] - want[c]).abs() <= 1.0 / vocab as f64);
                    }
                }
            }
        }
    }
}
