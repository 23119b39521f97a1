//! Four-tag reasoning traces.
//!
//! A trace is a `<SUMMARY>`, `<CAPTION>`, `<REASONING>` and `<CONCLUSION>`
//! block, in that order, with nothing but whitespace between blocks. The
//! reasoning block holds exactly four lines `Step k. <text>` and the
//! conclusion block a single line
//! `scene=<v>; gender=<v>; age=<v>; emotion=<v>`.
//!
//! Parsing never fails with an error: malformed text yields a
//! [`FormatReport`] listing every violation found.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DubError, Result};

macro_rules! closed_vocab {
    ($(#[$meta:meta])* $name:ident, $axis:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            /// Position of the label in [`Self::ALL`].
            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }
        }

        impl FromStr for $name {
            type Err = DubError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(DubError::UnknownLabel { axis: $axis, label: other.to_string() }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

closed_vocab!(
    /// Dubbing style of a clip.
    SceneType, "scene", {
        Dialogue => "dialogue",
        Monologue => "monologue",
        Narration => "narration",
    }
);

closed_vocab!(Gender, "gender", {
    Male => "male",
    Female => "female",
    Unknown => "unknown",
});

closed_vocab!(AgeBand, "age", {
    Child => "child",
    Adult => "adult",
    Elder => "elder",
    Unknown => "unknown",
});

closed_vocab!(Emotion, "emotion", {
    Neutral => "neutral",
    Happy => "happy",
    Sad => "sad",
    Angry => "angry",
    Fearful => "fearful",
    Surprised => "surprised",
    Unknown => "unknown",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpeakerAttributes {
    pub gender: Gender,
    pub age: AgeBand,
    pub emotion: Emotion,
}

/// The typed answer carried by the `<CONCLUSION>` block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Conclusion {
    pub scene: SceneType,
    #[serde(flatten)]
    pub attributes: SpeakerAttributes,
}

impl Conclusion {
    pub fn new(scene: SceneType, gender: Gender, age: AgeBand, emotion: Emotion) -> Self {
        Self {
            scene,
            attributes: SpeakerAttributes {
                gender,
                age,
                emotion,
            },
        }
    }

    /// Single-line serialization used inside the conclusion block.
    pub fn to_line(&self) -> String {
        format!(
            "scene={}; gender={}; age={}; emotion={}",
            self.scene, self.attributes.gender, self.attributes.age, self.attributes.emotion
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(';').map(str::trim).collect();
        let keys = ["scene", "gender", "age", "emotion"];
        if fields.len() != keys.len() {
            return Err(DubError::Parse(format!(
                "expected 4 `key=value` fields, found {}",
                fields.len()
            )));
        }
        let mut values = [""; 4];
        for (slot, (field, key)) in values.iter_mut().zip(fields.iter().zip(keys)) {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| DubError::Parse(format!("field `{field}` lacks `=`")))?;
            if k.trim() != key {
                return Err(DubError::Parse(format!("expected key `{key}`, found `{}`", k.trim())));
            }
            *slot = v.trim();
        }
        Ok(Conclusion::new(
            values[0].parse()?,
            values[1].parse()?,
            values[2].parse()?,
            values[3].parse()?,
        ))
    }
}

/// A complete reasoning trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTTrace {
    pub summary: String,
    pub caption: String,
    /// Step texts for `Step 1.` through `Step 4.`.
    pub steps: [String; 4],
    pub conclusion: Conclusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    MissingTag,
    UnclosedTag,
    MisorderedTag,
    DuplicateTag,
    WrongStepCount,
    EmptySection,
    StrayText,
    BadConclusion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    /// Character offset into the inspected text.
    pub location: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FormatReport {
    pub is_valid: bool,
    pub violations: Vec<Violation>,
}

impl FormatReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            is_valid: violations.is_empty(),
            violations,
        }
    }

    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Section {
    Summary,
    Caption,
    Reasoning,
    Conclusion,
}

impl Section {
    pub const ORDER: [Section; 4] = [
        Section::Summary,
        Section::Caption,
        Section::Reasoning,
        Section::Conclusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Section::Summary => "SUMMARY",
            Section::Caption => "CAPTION",
            Section::Reasoning => "REASONING",
            Section::Conclusion => "CONCLUSION",
        }
    }

    pub fn open_tag(self) -> String {
        format!("<{}>", self.name())
    }

    pub fn close_tag(self) -> String {
        format!("</{}>", self.name())
    }
}

fn contains_tag(text: &str) -> bool {
    Section::ORDER
        .iter()
        .any(|s| text.contains(&s.open_tag()) || text.contains(&s.close_tag()))
}

fn check_text_field(name: &str, text: &str, single_line: bool) -> Result<()> {
    if text.trim().is_empty() {
        return Err(DubError::Invariant(format!("{name} must be non-empty")));
    }
    if text.trim() != text {
        return Err(DubError::Invariant(format!(
            "{name} must not carry leading or trailing whitespace"
        )));
    }
    if contains_tag(text) {
        return Err(DubError::Invariant(format!("{name} must not contain trace tags")));
    }
    if single_line && text.contains(['\n', '\r']) {
        return Err(DubError::Invariant(format!("{name} must be a single line")));
    }
    Ok(())
}

impl CoTTrace {
    /// Checks the invariants `render_trace` relies on for an exact round trip.
    pub fn validate(&self) -> Result<()> {
        check_text_field("summary", &self.summary, false)?;
        check_text_field("caption", &self.caption, false)?;
        for (i, step) in self.steps.iter().enumerate() {
            check_text_field(&format!("reasoning step {}", i + 1), step, true)?;
        }
        Ok(())
    }

    fn section_body(&self, section: Section) -> String {
        match section {
            Section::Summary => self.summary.clone(),
            Section::Caption => self.caption.clone(),
            Section::Reasoning => {
                let mut body = String::from("\n");
                for (i, step) in self.steps.iter().enumerate() {
                    body.push_str(&format!("Step {}. {}\n", i + 1, step));
                }
                body
            }
            Section::Conclusion => self.conclusion.to_line(),
        }
    }

    fn blocks(&self) -> Vec<String> {
        Section::ORDER
            .iter()
            .map(|&s| format!("{}{}{}", s.open_tag(), self.section_body(s), s.close_tag()))
            .collect()
    }
}

/// Renders a trace in canonical tag order.
pub fn render_trace(trace: &CoTTrace) -> Result<String> {
    trace.validate()?;
    Ok(trace.blocks().join("\n"))
}

#[derive(Debug, Clone, Copy)]
struct TagToken {
    section: Section,
    closing: bool,
    start: usize,
    end: usize,
}

fn scan_tags(text: &str) -> Vec<TagToken> {
    let mut tokens = Vec::new();
    for (pos, _) in text.match_indices('<') {
        let rest = &text[pos..];
        for section in Section::ORDER {
            for closing in [false, true] {
                let tag = if closing {
                    section.close_tag()
                } else {
                    section.open_tag()
                };
                if rest.starts_with(&tag) {
                    tokens.push(TagToken {
                        section,
                        closing,
                        start: pos,
                        end: pos + tag.len(),
                    });
                }
            }
        }
    }
    tokens
}

fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

fn parse_steps(body: &str, body_start: usize, text: &str, out: &mut Vec<Violation>) -> Option<[String; 4]> {
    let loc = char_offset(text, body_start);
    let lines: Vec<&str> = body.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.is_empty() {
        out.push(Violation {
            code: ViolationCode::EmptySection,
            location: loc,
            message: "REASONING block is empty".into(),
        });
        return None;
    }
    if lines.len() != 4 {
        out.push(Violation {
            code: ViolationCode::WrongStepCount,
            location: loc,
            message: format!("expected 4 reasoning steps, found {}", lines.len()),
        });
        return None;
    }
    let mut steps: [String; 4] = Default::default();
    let mut ok = true;
    for (i, line) in lines.iter().enumerate() {
        let parsed = line
            .strip_prefix("Step ")
            .and_then(|r| r.split_once('.'))
            .and_then(|(n, rest)| n.trim().parse::<usize>().ok().map(|n| (n, rest.trim())));
        match parsed {
            Some((n, _)) if n != i + 1 => {
                out.push(Violation {
                    code: ViolationCode::WrongStepCount,
                    location: loc,
                    message: format!("reasoning line {} is numbered Step {n}", i + 1),
                });
                ok = false;
            }
            Some((_, "")) => {
                out.push(Violation {
                    code: ViolationCode::EmptySection,
                    location: loc,
                    message: format!("Step {} has no text", i + 1),
                });
                ok = false;
            }
            Some((_, rest)) => steps[i] = rest.to_string(),
            None => {
                out.push(Violation {
                    code: ViolationCode::WrongStepCount,
                    location: loc,
                    message: format!("reasoning line {} is not of the form `Step k. text`", i + 1),
                });
                ok = false;
            }
        }
    }
    ok.then_some(steps)
}

/// Parses `text` against the canonical grammar.
///
/// Returns the trace iff the text is well formed; otherwise a report with at
/// least one violation.
pub fn parse_trace(text: &str) -> std::result::Result<CoTTrace, FormatReport> {
    let tokens = scan_tags(text);
    let mut violations = Vec::new();

    // Tag multiplicity.
    for section in Section::ORDER {
        let opens: Vec<&TagToken> = tokens.iter().filter(|t| t.section == section && !t.closing).collect();
        let closes: Vec<&TagToken> = tokens.iter().filter(|t| t.section == section && t.closing).collect();
        let name = section.name();
        match (opens.len(), closes.len()) {
            (1, 1) => {}
            (0, 0) => violations.push(Violation {
                code: ViolationCode::MissingTag,
                location: 0,
                message: format!("missing {name} block"),
            }),
            (o, c) if o > 1 || c > 1 => {
                let second = if o > 1 { opens[1] } else { closes[1] };
                violations.push(Violation {
                    code: ViolationCode::DuplicateTag,
                    location: char_offset(text, second.start),
                    message: format!("{name} tag appears more than once"),
                });
            }
            (1, 0) => violations.push(Violation {
                code: ViolationCode::UnclosedTag,
                location: char_offset(text, opens[0].start),
                message: format!("<{name}> is never closed"),
            }),
            (_, _) => violations.push(Violation {
                code: ViolationCode::MissingTag,
                location: char_offset(text, closes[0].start),
                message: format!("</{name}> has no opening tag"),
            }),
        }
    }
    if !violations.is_empty() {
        return Err(FormatReport::from_violations(violations));
    }

    // Exactly eight tokens remain; they must alternate open/close in section order.
    let expected: Vec<(Section, bool)> = Section::ORDER
        .iter()
        .flat_map(|&s| [(s, false), (s, true)])
        .collect();
    if let Some((tok, _)) = tokens
        .iter()
        .zip(&expected)
        .find(|(t, (s, c))| t.section != *s || t.closing != *c)
    {
        violations.push(Violation {
            code: ViolationCode::MisorderedTag,
            location: char_offset(text, tok.start),
            message: format!(
                "{}{} out of order; expected SUMMARY, CAPTION, REASONING, CONCLUSION",
                if tok.closing { "/" } else { "" },
                tok.section.name()
            ),
        });
        return Err(FormatReport::from_violations(violations));
    }

    // Only whitespace may sit outside the blocks.
    let mut gaps = vec![(0, tokens[0].start)];
    for pair in tokens.chunks(2).collect::<Vec<_>>().windows(2) {
        gaps.push((pair[0][1].end, pair[1][0].start));
    }
    gaps.push((tokens[7].end, text.len()));
    for (a, b) in gaps {
        if let Some(off) = text[a..b].find(|c: char| !c.is_whitespace()) {
            violations.push(Violation {
                code: ViolationCode::StrayText,
                location: char_offset(text, a + off),
                message: "text outside tag pairs".into(),
            });
        }
    }

    let body = |i: usize| (tokens[2 * i].end, &text[tokens[2 * i].end..tokens[2 * i + 1].start]);
    let plain = |i: usize, out: &mut Vec<Violation>| -> Option<String> {
        let (start, b) = body(i);
        let trimmed = b.trim();
        if trimmed.is_empty() {
            out.push(Violation {
                code: ViolationCode::EmptySection,
                location: char_offset(text, start),
                message: format!("{} block is empty", Section::ORDER[i].name()),
            });
            None
        } else {
            Some(trimmed.to_string())
        }
    };
    let summary = plain(0, &mut violations);
    let caption = plain(1, &mut violations);
    let (rstart, rbody) = body(2);
    let steps = parse_steps(rbody, rstart, text, &mut violations);
    let conclusion = plain(3, &mut violations).and_then(|line| match Conclusion::parse_line(&line) {
        Ok(c) if !line.contains('\n') => Some(c),
        Ok(_) => {
            violations.push(Violation {
                code: ViolationCode::BadConclusion,
                location: char_offset(text, body(3).0),
                message: "conclusion must be a single line".into(),
            });
            None
        }
        Err(e) => {
            violations.push(Violation {
                code: ViolationCode::BadConclusion,
                location: char_offset(text, body(3).0),
                message: e.to_string(),
            });
            None
        }
    });

    match (summary, caption, steps, conclusion) {
        (Some(summary), Some(caption), Some(steps), Some(conclusion)) if violations.is_empty() => {
            Ok(CoTTrace {
                summary,
                caption,
                steps,
                conclusion,
            })
        }
        _ => Err(FormatReport::from_violations(violations)),
    }
}

/// Format check: `true` exactly when [`parse_trace`] succeeds.
pub fn validate_format(text: &str) -> (bool, FormatReport) {
    match parse_trace(text) {
        Ok(_) => (true, FormatReport::from_violations(Vec::new())),
        Err(report) => (false, report),
    }
}

pub fn extract_answer(trace: &CoTTrace) -> Conclusion {
    trace.conclusion
}

/// Single-edit corruptions of a rendered trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    DeleteTag,
    SwapAdjacentBlocks,
    DuplicateBlock,
    RemoveStep,
    BlankSection,
}

impl Mutation {
    pub const ALL: [Mutation; 5] = [
        Mutation::DeleteTag,
        Mutation::SwapAdjacentBlocks,
        Mutation::DuplicateBlock,
        Mutation::RemoveStep,
        Mutation::BlankSection,
    ];

    /// Violation the mutation is expected to provoke.
    pub fn expected_codes(self) -> &'static [ViolationCode] {
        match self {
            Mutation::DeleteTag => &[ViolationCode::MissingTag, ViolationCode::UnclosedTag],
            Mutation::SwapAdjacentBlocks => &[ViolationCode::MisorderedTag],
            Mutation::DuplicateBlock => &[ViolationCode::DuplicateTag],
            Mutation::RemoveStep => &[ViolationCode::WrongStepCount],
            Mutation::BlankSection => &[ViolationCode::EmptySection],
        }
    }
}

/// Applies one mutation to the canonical rendering of `trace`.
pub fn mutate_trace<R: Rng + ?Sized>(trace: &CoTTrace, mutation: Mutation, rng: &mut R) -> Result<String> {
    trace.validate()?;
    let mut blocks = trace.blocks();
    let text = match mutation {
        Mutation::DeleteTag => {
            let section = *Section::ORDER.choose(rng).expect("non-empty");
            let tag = if rng.gen_bool(0.5) {
                section.close_tag()
            } else {
                section.open_tag()
            };
            blocks.join("\n").replacen(&tag, "", 1)
        }
        Mutation::SwapAdjacentBlocks => {
            let i = rng.gen_range(0..3);
            blocks.swap(i, i + 1);
            blocks.join("\n")
        }
        Mutation::DuplicateBlock => {
            let i = rng.gen_range(0..4);
            let copy = blocks[i].clone();
            blocks.insert(i + 1, copy);
            blocks.join("\n")
        }
        Mutation::RemoveStep => {
            let drop = rng.gen_range(0..4);
            let mut body = String::from("\n");
            for (i, step) in trace.steps.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, s)| s).enumerate() {
                body.push_str(&format!("Step {}. {}\n", i + 1, step));
            }
            blocks[2] = format!("<REASONING>{body}</REASONING>");
            blocks.join("\n")
        }
        Mutation::BlankSection => {
            let i = rng.gen_range(0..4);
            let s = Section::ORDER[i];
            blocks[i] = format!("{}{}", s.open_tag(), s.close_tag());
            blocks.join("\n")
        }
    };
    Ok(text)
}
