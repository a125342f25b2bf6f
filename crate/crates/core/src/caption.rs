//! Structured omni-caption grammar.
//!
//! A caption is a whitespace-tokenized prompt with three sections in a fixed
//! order:
//!
//! ```text
//! L_1 <sub1> is D_v1 , with D_a1 .   ...   L_N <subN> is D_vN , with D_aN .
//! D_env D_act ( ... L_i <sub_i> acts ... )
//! L_k <sub_k> says <S> T_kj <E> .
//! ```
//!
//! Subject descriptors come first and must be declared in increasing subject
//! order. Everything after the descriptors and before the first sentence that
//! carries a `<S>` marker is the global (environment/action) section. The
//! remaining sentences are speech sentences; a non-speech sentence after the
//! first speech sentence is rejected.
//!
//! Ranges follow two conventions: `Span` is an inclusive `(start, end)` pair
//! (descriptor sentences, speech content), and `Range<usize>` is half-open
//! (labels, descriptions, the global section), which allows empty ranges.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SPEECH_START: &str = "<S>";
pub const SPEECH_END: &str = "<E>";
const ANCHOR_PREFIX: &str = "<sub";
const SENTENCE_END: &str = ".";
const DESCRIPTOR_COPULA: &str = "is";
const DESCRIPTOR_WITH: &str = "with";
const PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Word,
    AnchorTag(u32),
    SpeechStart,
    SpeechEnd,
}

impl TokenKind {
    pub fn anchor_id(self) -> Option<u32> {
        match self {
            TokenKind::AnchorTag(id) => Some(id),
            _ => None,
        }
    }

    fn is_speech_marker(self) -> bool {
        matches!(self, TokenKind::SpeechStart | TokenKind::SpeechEnd)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub index: usize,
    pub text: String,
    pub kind: TokenKind,
}

/// Inclusive token-index pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, index: usize) -> bool {
        self.start <= index && index <= self.end
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_range(&self) -> Range<usize> {
        self.start..self.end + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectDescriptor {
    pub subject_id: u32,
    pub label: Range<usize>,
    pub visual_desc: Range<usize>,
    pub acoustic_desc: Range<usize>,
    pub span: Span,
}

impl SubjectDescriptor {
    /// Index of the `<sub_i>` token, which immediately follows the label.
    pub fn anchor_index(&self) -> usize {
        self.label.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechUtterance {
    pub speaker_id: u32,
    /// Tokens strictly between `<S>` and `<E>`.
    pub content: Span,
    /// Per-speaker ordinal, starting at 0.
    pub utterance_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OmniCaption {
    pub tokens: Vec<Token>,
    pub subjects: Vec<SubjectDescriptor>,
    pub global_section: Range<usize>,
    pub utterances: Vec<SpeechUtterance>,
}

/// Location of a token in the source text. Lines and columns are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Location {
    pub token: usize,
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{} (token {})", self.line, self.column, self.token)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CaptionError {
    #[error("empty caption")]
    EmptyInput,
    #[error("{at}: `<S>` has no matching `<E>`")]
    UnterminatedSpeech { at: Location },
    #[error("{at}: `<E>` without an opening `<S>`")]
    UnmatchedSpeechEnd { at: Location },
    #[error("{at}: speech span `<S> <E>` has no content")]
    EmptySpeech { at: Location },
    #[error("{at}: `<sub{subject_id}>` is used without a preceding descriptor")]
    UnknownAnchor { subject_id: u32, at: Location },
    #[error("{at}: speech has no preceding anchor naming the speaker")]
    MissingSpeaker { at: Location },
    #[error("{at}: malformed subject descriptor: {reason}")]
    MalformedDescriptor { reason: String, at: Location },
    #[error("{at}: malformed anchor tag `{text}`")]
    MalformedTag { text: String, at: Location },
    #[error("{at}: global section text after a speech sentence")]
    InterleavedSections { at: Location },
}

impl CaptionError {
    pub fn location(&self) -> Option<Location> {
        match self {
            CaptionError::EmptyInput => None,
            CaptionError::UnterminatedSpeech { at }
            | CaptionError::UnmatchedSpeechEnd { at }
            | CaptionError::EmptySpeech { at }
            | CaptionError::UnknownAnchor { at, .. }
            | CaptionError::MissingSpeaker { at }
            | CaptionError::MalformedDescriptor { at, .. }
            | CaptionError::MalformedTag { at, .. }
            | CaptionError::InterleavedSections { at } => Some(*at),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DiagnosticKind {
    TokenIndex,
    TokenKind,
    DescriptorShape,
    DescriptorOverlap,
    DescriptorOrder,
    DuplicateSubject,
    UnknownAnchor,
    SectionOrder,
    SpeechPairing,
    UtteranceShape,
    SpeakerMismatch,
    UtteranceIndex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub range: Range<usize>,
    pub message: String,
}

impl Diagnostic {
    fn new(kind: DiagnosticKind, range: Range<usize>, message: impl Into<String>) -> Self {
        Self {
            kind,
            range,
            message: message.into(),
        }
    }
}

/// Classify one canonical token. `None` means the text looks like an anchor
/// tag but is not a valid one.
pub fn classify_token(text: &str) -> Option<TokenKind> {
    match text {
        SPEECH_START => return Some(TokenKind::SpeechStart),
        SPEECH_END => return Some(TokenKind::SpeechEnd),
        _ => {}
    }
    let Some(rest) = text.strip_prefix(ANCHOR_PREFIX) else {
        return Some(TokenKind::Word);
    };
    let Some(digits) = rest.strip_suffix('>') else {
        return Some(TokenKind::Word);
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return None;
    }
    digits.parse::<u32>().ok().map(TokenKind::AnchorTag)
}

struct RawToken {
    text: String,
    line: usize,
    column: usize,
}

fn is_tag_start(s: &str) -> Option<usize> {
    if s.starts_with(SPEECH_START) || s.starts_with(SPEECH_END) {
        return Some(3);
    }
    if s.starts_with(ANCHOR_PREFIX) {
        return s.find('>').map(|i| i + 1);
    }
    None
}

fn push_word(out: &mut Vec<RawToken>, word: &str, line: usize, column: usize) {
    let core = word.trim_end_matches(PUNCTUATION);
    if !core.is_empty() {
        out.push(RawToken {
            text: core.to_string(),
            line,
            column,
        });
    }
    for (offset, ch) in word[core.len()..].char_indices() {
        out.push(RawToken {
            text: ch.to_string(),
            line,
            column: column + word[..core.len() + offset].chars().count(),
        });
    }
}

/// Whitespace tokenization with two normalizations: tags glued to
/// neighbouring text are split off, and trailing punctuation is split into
/// one token per character.
fn tokenize(text: &str) -> Vec<RawToken> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let mut chunk_start = None;
        let bytes: Vec<(usize, char)> = line.char_indices().collect();
        for (i, &(byte, ch)) in bytes.iter().enumerate() {
            if ch.is_whitespace() {
                if let Some(start) = chunk_start.take() {
                    split_chunk(&mut out, line, start, byte, line_no + 1);
                }
            } else if chunk_start.is_none() {
                chunk_start = Some(byte);
            }
            if i + 1 == bytes.len() {
                if let Some(start) = chunk_start.take() {
                    split_chunk(&mut out, line, start, line.len(), line_no + 1);
                }
            }
        }
    }
    out
}

fn split_chunk(out: &mut Vec<RawToken>, line: &str, start: usize, end: usize, line_no: usize) {
    let chunk = &line[start..end];
    let col_of = |byte: usize| line[..start + byte].chars().count() + 1;
    let mut word_start = 0;
    let mut pos = 0;
    while pos < chunk.len() {
        if let Some(len) = is_tag_start(&chunk[pos..]) {
            if pos > word_start {
                push_word(out, &chunk[word_start..pos], line_no, col_of(word_start));
            }
            out.push(RawToken {
                text: chunk[pos..pos + len].to_string(),
                line: line_no,
                column: col_of(pos),
            });
            pos += len;
            word_start = pos;
        } else {
            pos += chunk[pos..].chars().next().map_or(1, char::len_utf8);
        }
    }
    if word_start < chunk.len() {
        push_word(out, &chunk[word_start..], line_no, col_of(word_start));
    }
}

struct Sentence {
    span: Span,
    has_speech: bool,
}

struct Parser {
    tokens: Vec<Token>,
    locations: Vec<(usize, usize)>,
}

impl Parser {
    fn loc(&self, token: usize) -> Location {
        let (line, column) = self.locations[token];
        Location { token, line, column }
    }

    fn is_word(&self, i: usize, text: &str) -> bool {
        self.tokens[i].kind == TokenKind::Word && self.tokens[i].text == text
    }

    /// Split the stream at `.` tokens outside speech spans, checking marker
    /// pairing on the way.
    fn sentences(&self) -> Result<Vec<Sentence>, CaptionError> {
        let mut out = Vec::new();
        let mut start = 0;
        let mut open: Option<usize> = None;
        let mut has_speech = false;
        for (i, tok) in self.tokens.iter().enumerate() {
            match tok.kind {
                TokenKind::SpeechStart => {
                    if let Some(prev) = open {
                        return Err(CaptionError::UnterminatedSpeech { at: self.loc(prev) });
                    }
                    open = Some(i);
                    has_speech = true;
                }
                TokenKind::SpeechEnd => {
                    let Some(s) = open.take() else {
                        return Err(CaptionError::UnmatchedSpeechEnd { at: self.loc(i) });
                    };
                    if s + 1 == i {
                        return Err(CaptionError::EmptySpeech { at: self.loc(s) });
                    }
                }
                _ => {}
            }
            let last = i + 1 == self.tokens.len();
            if open.is_none() && (self.is_word(i, SENTENCE_END) || last) {
                out.push(Sentence {
                    span: Span::new(start, i),
                    has_speech,
                });
                start = i + 1;
                has_speech = false;
            }
        }
        if let Some(s) = open {
            return Err(CaptionError::UnterminatedSpeech { at: self.loc(s) });
        }
        Ok(out)
    }

    fn first_anchor(&self, span: Span) -> Option<(usize, u32)> {
        span.as_range()
            .find_map(|i| self.tokens[i].kind.anchor_id().map(|id| (i, id)))
    }

    fn descriptor(&self, span: Span, anchor: usize, id: u32) -> Result<SubjectDescriptor, CaptionError> {
        let malformed = |reason: &str, at: usize| CaptionError::MalformedDescriptor {
            reason: reason.to_string(),
            at: self.loc(at),
        };
        if !self.is_word(span.end, SENTENCE_END) {
            return Err(malformed("descriptor must end with `.`", span.end));
        }
        if anchor + 1 > span.end || !self.is_word(anchor + 1, DESCRIPTOR_COPULA) {
            return Err(malformed("anchor must be followed by `is`", anchor));
        }
        let with = (anchor + 2..span.end)
            .find(|&i| self.is_word(i, DESCRIPTOR_WITH))
            .ok_or_else(|| malformed("missing `with` before the acoustic description", anchor))?;
        let mut visual_end = with;
        if visual_end > anchor + 2 && self.is_word(visual_end - 1, ",") {
            visual_end -= 1;
        }
        if visual_end == anchor + 2 {
            return Err(malformed("empty visual description", anchor + 1));
        }
        if with + 1 == span.end {
            return Err(malformed("empty acoustic description", with));
        }
        if let Some(other) = (anchor + 1..=span.end).find(|&i| self.tokens[i].kind.anchor_id().is_some()) {
            return Err(malformed("a descriptor may name only its own subject", other));
        }
        Ok(SubjectDescriptor {
            subject_id: id,
            label: span.start..anchor,
            visual_desc: anchor + 2..visual_end,
            acoustic_desc: with + 1..span.end,
            span,
        })
    }

    fn parse(self) -> Result<OmniCaption, CaptionError> {
        let sentences = self.sentences()?;
        let mut subjects: Vec<SubjectDescriptor> = Vec::new();
        let mut declared = BTreeSet::new();

        let mut rest = sentences.iter().peekable();
        while let Some(sentence) = rest.peek() {
            if sentence.has_speech {
                break;
            }
            let Some((anchor, id)) = self.first_anchor(sentence.span) else {
                break;
            };
            if declared.contains(&id) {
                break;
            }
            if let Some(prev) = subjects.last() {
                if id < prev.subject_id {
                    return Err(CaptionError::MalformedDescriptor {
                        reason: format!(
                            "subject {id} declared after subject {}; descriptors must be in subject order",
                            prev.subject_id
                        ),
                        at: self.loc(anchor),
                    });
                }
            }
            subjects.push(self.descriptor(sentence.span, anchor, id)?);
            declared.insert(id);
            rest.next();
        }

        let body_start = subjects.last().map_or(0, |s| s.span.end + 1);
        let mut global_end = self.tokens.len();
        let mut seen_speech = false;
        for sentence in rest {
            if sentence.has_speech {
                if !seen_speech {
                    global_end = sentence.span.start;
                }
                seen_speech = true;
            } else if seen_speech {
                return Err(CaptionError::InterleavedSections {
                    at: self.loc(sentence.span.start),
                });
            }
        }

        for i in body_start..self.tokens.len() {
            if let TokenKind::AnchorTag(id) = self.tokens[i].kind {
                if !declared.contains(&id) {
                    return Err(CaptionError::UnknownAnchor {
                        subject_id: id,
                        at: self.loc(i),
                    });
                }
            }
        }

        let mut utterances = Vec::new();
        let mut per_speaker: BTreeMap<u32, usize> = BTreeMap::new();
        let mut open = None;
        for i in global_end..self.tokens.len() {
            match self.tokens[i].kind {
                TokenKind::SpeechStart => open = Some(i),
                TokenKind::SpeechEnd => {
                    let s = open.take().expect("pairing checked while splitting sentences");
                    let speaker_id = nearest_anchor(&self.tokens, s)
                        .ok_or_else(|| CaptionError::MissingSpeaker { at: self.loc(s) })?;
                    let j = per_speaker.entry(speaker_id).or_insert(0);
                    utterances.push(SpeechUtterance {
                        speaker_id,
                        content: Span::new(s + 1, i - 1),
                        utterance_index: *j,
                    });
                    *j += 1;
                }
                _ => {}
            }
        }

        Ok(OmniCaption {
            tokens: self.tokens,
            subjects,
            global_section: body_start..global_end,
            utterances,
        })
    }
}

fn nearest_anchor(tokens: &[Token], before: usize) -> Option<u32> {
    tokens[..before].iter().rev().find_map(|t| t.kind.anchor_id())
}

/// Parse caption text into its structured form.
pub fn parse_caption(text: &str) -> Result<OmniCaption, CaptionError> {
    let raw = tokenize(text);
    if raw.is_empty() {
        return Err(CaptionError::EmptyInput);
    }
    let mut tokens = Vec::with_capacity(raw.len());
    let mut locations = Vec::with_capacity(raw.len());
    for (index, tok) in raw.into_iter().enumerate() {
        let at = Location {
            token: index,
            line: tok.line,
            column: tok.column,
        };
        let kind = classify_token(&tok.text).ok_or_else(|| CaptionError::MalformedTag {
            text: tok.text.clone(),
            at,
        })?;
        locations.push((tok.line, tok.column));
        tokens.push(Token {
            index,
            text: tok.text,
            kind,
        });
    }
    Parser { tokens, locations }.parse()
}

/// Canonical text: token texts joined by single spaces.
pub fn serialize_caption(caption: &OmniCaption) -> String {
    caption
        .tokens
        .iter()
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

fn within(inner: &Range<usize>, outer: &Span) -> bool {
    inner.start >= outer.start && inner.end <= outer.end + 1 && inner.start <= inner.end
}

/// Check every structural invariant of a caption. An empty result means the
/// caption is valid.
pub fn validate_caption(caption: &OmniCaption) -> Vec<Diagnostic> {
    use DiagnosticKind as K;
    let mut out = Vec::new();
    let n = caption.tokens.len();

    for (i, tok) in caption.tokens.iter().enumerate() {
        if tok.index != i {
            out.push(Diagnostic::new(
                K::TokenIndex,
                i..i + 1,
                format!("token at position {i} carries index {}", tok.index),
            ));
        }
        if classify_token(&tok.text) != Some(tok.kind) {
            out.push(Diagnostic::new(
                K::TokenKind,
                i..i + 1,
                format!("token `{}` does not match kind {:?}", tok.text, tok.kind),
            ));
        }
    }

    let mut declared = BTreeSet::new();
    for subject in &caption.subjects {
        let span = subject.span;
        let range = span.start..(span.end + 1).min(n.max(span.start));
        if !declared.insert(subject.subject_id) {
            out.push(Diagnostic::new(
                K::DuplicateSubject,
                range.clone(),
                format!("subject {} declared twice", subject.subject_id),
            ));
        }
        let anchor = subject.anchor_index();
        let anchored = caption
            .tokens
            .get(anchor)
            .is_some_and(|t| t.kind == TokenKind::AnchorTag(subject.subject_id));
        let shaped = span.start <= span.end
            && span.end < n
            && within(&subject.label, &span)
            && within(&subject.visual_desc, &span)
            && within(&subject.acoustic_desc, &span)
            && anchored
            && subject.visual_desc.start > anchor
            && subject.visual_desc.end <= subject.acoustic_desc.start
            && !subject.visual_desc.is_empty()
            && !subject.acoustic_desc.is_empty();
        if !shaped {
            out.push(Diagnostic::new(
                K::DescriptorShape,
                range,
                format!(
                    "descriptor for subject {} is not `label <sub> is visual with acoustic .`",
                    subject.subject_id
                ),
            ));
        }
    }

    for pair in caption.subjects.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let range = a.span.start.min(b.span.start)..a.span.end.max(b.span.end) + 1;
        if a.span.end >= b.span.start && b.span.end >= a.span.start {
            out.push(Diagnostic::new(
                K::DescriptorOverlap,
                range,
                format!("descriptors of subjects {} and {} overlap", a.subject_id, b.subject_id),
            ));
        } else if a.span.start > b.span.start || a.subject_id >= b.subject_id {
            out.push(Diagnostic::new(
                K::DescriptorOrder,
                range,
                format!("subjects {} and {} are out of order", a.subject_id, b.subject_id),
            ));
        }
    }

    let descriptors_end = caption.subjects.iter().map(|s| s.span.end + 1).max().unwrap_or(0);
    let global = &caption.global_section;
    let first_utterance = caption.utterances.iter().map(|u| u.content.start).min();
    if global.start < descriptors_end
        || global.start > global.end
        || global.end > n
        || first_utterance.is_some_and(|u| u < global.end)
    {
        out.push(Diagnostic::new(
            K::SectionOrder,
            global.clone(),
            "sections must be ordered descriptors, global section, speech",
        ));
    }

    let body_start = global.start.max(descriptors_end).min(n);
    for (i, tok) in caption.tokens.iter().enumerate().skip(body_start) {
        if let TokenKind::AnchorTag(id) = tok.kind {
            if !declared.contains(&id) {
                out.push(Diagnostic::new(
                    K::UnknownAnchor,
                    i..i + 1,
                    format!("`<sub{id}>` has no descriptor"),
                ));
            }
        }
    }

    let starts = caption
        .tokens
        .iter()
        .filter(|t| t.kind == TokenKind::SpeechStart)
        .count();
    let ends = caption.tokens.iter().filter(|t| t.kind == TokenKind::SpeechEnd).count();
    if starts != ends || starts != caption.utterances.len() {
        out.push(Diagnostic::new(
            K::SpeechPairing,
            0..n,
            format!(
                "{starts} `<S>`, {ends} `<E>` and {} utterances",
                caption.utterances.len()
            ),
        ));
    }

    let mut per_speaker: BTreeMap<u32, usize> = BTreeMap::new();
    for u in &caption.utterances {
        let c = u.content;
        let range = c.start.saturating_sub(1)..(c.end + 2).min(n);
        let flanked = c.start >= 1
            && c.start <= c.end
            && c.end + 1 < n
            && caption.tokens[c.start - 1].kind == TokenKind::SpeechStart
            && caption.tokens[c.end + 1].kind == TokenKind::SpeechEnd
            && !caption.tokens[c.as_range()].iter().any(|t| t.kind.is_speech_marker());
        if !flanked {
            out.push(Diagnostic::new(
                K::UtteranceShape,
                range,
                "utterance content must be non-empty and sit strictly between `<S>` and `<E>`",
            ));
            continue;
        }
        if nearest_anchor(&caption.tokens, c.start - 1) != Some(u.speaker_id) {
            out.push(Diagnostic::new(
                K::SpeakerMismatch,
                range.clone(),
                format!("nearest anchor before `<S>` does not name speaker {}", u.speaker_id),
            ));
        }
        let expected = per_speaker.entry(u.speaker_id).or_insert(0);
        if u.utterance_index != *expected {
            out.push(Diagnostic::new(
                K::UtteranceIndex,
                range,
                format!(
                    "utterance {} of speaker {} carries index {}",
                    expected, u.speaker_id, u.utterance_index
                ),
            ));
        }
        *expected += 1;
    }

    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub i: usize,
    pub text: String,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: u32,
    pub s: usize,
    pub e: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub speaker: u32,
    pub start: usize,
    pub end: usize,
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeRecord {
    pub start: usize,
    pub end: usize,
}

/// JSON dump of a parsed caption. `subjects` and `utterances` use inclusive
/// bounds; `global` is half-open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionDump {
    pub tokens: Vec<TokenRecord>,
    pub subjects: Vec<SubjectRecord>,
    pub utterances: Vec<UtteranceRecord>,
    pub global: RangeRecord,
}

impl From<&OmniCaption> for CaptionDump {
    fn from(c: &OmniCaption) -> Self {
        let kind = |k: TokenKind| match k {
            TokenKind::Word => "word",
            TokenKind::AnchorTag(_) => "anchor",
            TokenKind::SpeechStart => "speech_start",
            TokenKind::SpeechEnd => "speech_end",
        };
        CaptionDump {
            tokens: c
                .tokens
                .iter()
                .map(|t| TokenRecord {
                    i: t.index,
                    text: t.text.clone(),
                    kind: kind(t.kind).to_string(),
                })
                .collect(),
            subjects: c
                .subjects
                .iter()
                .map(|s| SubjectRecord {
                    id: s.subject_id,
                    s: s.span.start,
                    e: s.span.end,
                })
                .collect(),
            utterances: c
                .utterances
                .iter()
                .map(|u| UtteranceRecord {
                    speaker: u.speaker_id,
                    start: u.content.start,
                    end: u.content.end,
                    j: u.utterance_index,
                })
                .collect(),
            global: RangeRecord {
                start: c.global_section.start,
                end: c.global_section.end,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_SUBJECT: &str = "A <sub1> is tall with calm voice . <sub1> says <S> hi there <E>";

    #[test]
    fn one_subject_fixture() {
        let c = parse_caption(ONE_SUBJECT).unwrap();
        assert_eq!(c.tokens.len(), 14);
        assert_eq!(c.subjects.len(), 1);
        let s = &c.subjects[0];
        assert_eq!(s.subject_id, 1);
        assert_eq!(s.span, Span::new(0, 7));
        assert_eq!(s.label, 0..1);
        assert_eq!(s.visual_desc, 3..4);
        assert_eq!(s.acoustic_desc, 5..7);
        assert_eq!(c.global_section, 8..8);
        assert_eq!(
            c.utterances,
            vec![SpeechUtterance {
                speaker_id: 1,
                content: Span::new(11, 12),
                utterance_index: 0
            }]
        );
        assert!(validate_caption(&c).is_empty());
    }

    #[test]
    fn empty_and_whitespace_inputs() {
        assert_eq!(parse_caption(""), Err(CaptionError::EmptyInput));
        assert_eq!(parse_caption(" \n\t "), Err(CaptionError::EmptyInput));
    }

    #[test]
    fn unterminated_speech() {
        let err = parse_caption("A <sub1> is tall with calm voice . <sub1> says <S> hi").unwrap_err();
        assert!(matches!(err, CaptionError::UnterminatedSpeech { at } if at.token == 10));
        let err = parse_caption("A <sub1> is tall with calm voice . <sub1> says <S> hi <S> yo <E>").unwrap_err();
        assert!(matches!(err, CaptionError::UnterminatedSpeech { .. }));
    }

    #[test]
    fn stray_and_empty_speech_markers() {
        let err = parse_caption("A <sub1> is tall with calm voice . hi <E>").unwrap_err();
        assert!(matches!(err, CaptionError::UnmatchedSpeechEnd { at } if at.token == 9));
        let err = parse_caption("A <sub1> is tall with calm voice . <sub1> says <S> <E>").unwrap_err();
        assert!(matches!(err, CaptionError::EmptySpeech { .. }));
    }

    #[test]
    fn unknown_anchor() {
        let err = parse_caption("A <sub1> is tall with calm voice . <sub2> says <S> hi <E>").unwrap_err();
        assert!(matches!(err, CaptionError::UnknownAnchor { subject_id: 2, at } if at.token == 8));
        let err = parse_caption("<sub1> says <S> hi <E>").unwrap_err();
        assert!(matches!(err, CaptionError::UnknownAnchor { subject_id: 1, .. }));
    }

    #[test]
    fn malformed_descriptors() {
        for text in [
            "A <sub1> tall with calm voice .",
            "A <sub1> is tall and calm .",
            "A <sub1> is with calm voice .",
            "A <sub1> is tall with .",
            "A <sub1> is tall with calm voice",
            "A <sub2> is tall with calm voice . B <sub1> is short with deep voice .",
            "A <sub1> is tall with a voice like <sub2> .",
        ] {
            let err = parse_caption(text).unwrap_err();
            assert!(
                matches!(err, CaptionError::MalformedDescriptor { .. }),
                "{text}: {err:?}"
            );
        }
    }

    #[test]
    fn malformed_tags() {
        for text in [
            "<sub0> is x with y .",
            "A <sub01> is x with y .",
            "A <subx> is x with y .",
        ] {
            assert!(
                matches!(parse_caption(text), Err(CaptionError::MalformedTag { .. })),
                "{text}"
            );
        }
    }

    #[test]
    fn interleaved_sections_rejected() {
        let text = "A <sub1> is tall with calm voice . <sub1> says <S> hi <E> . It rains .";
        assert!(matches!(
            parse_caption(text),
            Err(CaptionError::InterleavedSections { at }) if at.token == 14
        ));
    }

    #[test]
    fn normalizes_glued_punctuation_and_tags() {
        let c = parse_caption("A <sub1> is tall, with calm voice.\n<sub1> says <S>hi there<E>.").unwrap();
        let canonical = serialize_caption(&c);
        assert_eq!(
            canonical,
            "A <sub1> is tall , with calm voice . <sub1> says <S> hi there <E> ."
        );
        assert_eq!(c.subjects[0].visual_desc, 3..4);
        assert_eq!(parse_caption(&canonical).unwrap(), c);
    }

    #[test]
    fn locations_are_line_and_column() {
        let err = parse_caption("A <sub1> is tall with calm voice .\n  <sub3> waves .").unwrap_err();
        let at = err.location().unwrap();
        assert_eq!((at.token, at.line, at.column), (8, 2, 3));
    }

    #[test]
    fn global_only_caption() {
        let text = "A busy street at night . Cars pass by .";
        let c = parse_caption(text).unwrap();
        assert!(c.subjects.is_empty());
        assert_eq!(c.global_section, 0..c.tokens.len());
        assert_eq!(serialize_caption(&c), text);
    }

    #[test]
    fn speech_content_may_contain_periods() {
        let text = "A <sub1> is tall with calm voice . <sub1> says <S> hi . how are you ? <E> .";
        let c = parse_caption(text).unwrap();
        assert_eq!(c.utterances[0].content, Span::new(11, 16));
    }

    #[test]
    fn repeated_declaration_falls_into_global_section() {
        let text = "A <sub1> is tall with calm voice . The man <sub1> is walking with a dog .";
        let c = parse_caption(text).unwrap();
        assert_eq!(c.subjects.len(), 1);
        assert_eq!(c.global_section, 8..c.tokens.len());
    }

    #[test]
    fn unknown_speaker_diagnostic() {
        let mut c = parse_caption(ONE_SUBJECT).unwrap();
        c.tokens[8] = Token {
            index: 8,
            text: "<sub2>".into(),
            kind: TokenKind::AnchorTag(2),
        };
        c.utterances[0].speaker_id = 2;
        let diags = validate_caption(&c);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert_eq!(diags[0].kind, DiagnosticKind::UnknownAnchor);
        assert_eq!(diags[0].range, 8..9);
    }

    #[test]
    fn overlapping_descriptors_diagnostic() {
        let text = "A <sub1> is tall with calm voice . B <sub2> is short with deep voice .";
        let mut c = parse_caption(text).unwrap();
        assert!(validate_caption(&c).is_empty());
        c.subjects[1].span.start = 6;
        let diags = validate_caption(&c);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert_eq!(diags[0].kind, DiagnosticKind::DescriptorOverlap);
    }

    #[test]
    fn speaker_mismatch_and_bad_index_diagnostics() {
        let text = "A <sub1> is tall with calm voice . B <sub2> is short with deep voice . <sub1> says <S> hi <E> . <sub2> says <S> yo <E> .";
        let mut c = parse_caption(text).unwrap();
        assert!(validate_caption(&c).is_empty());
        c.utterances[1].speaker_id = 1;
        let kinds: Vec<_> = validate_caption(&c).into_iter().map(|d| d.kind).collect();
        assert_eq!(
            kinds,
            vec![DiagnosticKind::SpeakerMismatch, DiagnosticKind::UtteranceIndex]
        );
    }

    #[test]
    fn dump_schema() {
        let c = parse_caption(ONE_SUBJECT).unwrap();
        let json = serde_json::to_value(CaptionDump::from(&c)).unwrap();
        assert_eq!(json["subjects"], serde_json::json!([{"id": 1, "s": 0, "e": 7}]));
        assert_eq!(
            json["utterances"],
            serde_json::json!([{"speaker": 1, "start": 11, "end": 12, "j": 0}])
        );
        assert_eq!(json["global"], serde_json::json!({"start": 8, "end": 8}));
        assert_eq!(
            json["tokens"][1],
            serde_json::json!({"i": 1, "text": "<sub1>", "kind": "anchor"})
        );
    }
}
