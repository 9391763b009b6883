//! Structured two-block response protocol and its binary format reward.
//!
//! A conforming response is exactly one `<think>…</think>` block followed by
//! exactly one `<answer>…</answer>` block. The think block carries up to four
//! labeled sections in a fixed order (a summary, "Directions for
//! Improvement", "Issues to Avoid", and a decision rationale); the answer
//! block carries a single JSON object with exactly the keys `bbox_2d`
//! (4-element integer array), `rating` (number in `[1.0, 5.0]` with at most
//! two decimal places), and `tool` (`"crop"` or `"final"`).
//!
//! Parsing is deliberately unforgiving: the format reward exists to teach a
//! policy the protocol, so near-misses (duplicated tags, trailing junk after
//! the JSON object, out-of-range ratings, inverted boxes) are hard failures
//! rather than best-effort repairs. The one deliberate exception is crop
//! geometry that merely overshoots the image: a well-ordered box that still
//! intersects the image parses fine and is clamped when the crop is applied,
//! because the reward penalizes format, not geometric taste.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Hard cap on protocol turns: an initial full-image turn plus at most one
/// crop-and-rezoom turn.
pub const MAX_TURNS: usize = 2;
/// Inclusive rating bounds.
pub const RATING_MIN: f64 = 1.0;
pub const RATING_MAX: f64 = 5.0;

/// Axis-aligned integer pixel box `[x1, y1, x2, y2]`.
///
/// The all-zero box is a sentinel meaning "no crop" and accompanies every
/// final answer. Real crop boxes must satisfy `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl BBox {
    /// The "no crop" sentinel.
    pub const SENTINEL: BBox = BBox {
        x1: 0,
        y1: 0,
        x2: 0,
        y2: 0,
    };

    pub fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [i64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [i64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_sentinel(self) -> bool {
        self == BBox::SENTINEL
    }

    /// Both axes strictly ordered (`x1 < x2`, `y1 < y2`).
    pub fn is_ordered(self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    /// Clamps the box into `[0, w] × [0, h]` without reordering corners.
    pub fn clamp_to(self, w: u32, h: u32) -> BBox {
        BBox {
            x1: self.x1.clamp(0, w as i64),
            y1: self.y1.clamp(0, h as i64),
            x2: self.x2.clamp(0, w as i64),
            y2: self.y2.clamp(0, h as i64),
        }
    }

    /// True when the clamped box still has positive area, i.e. the box
    /// overlaps the image at all.
    pub fn intersects_image(self, w: u32, h: u32) -> bool {
        self.clamp_to(w, h).is_ordered()
    }

    /// Area in pixels; zero for the sentinel and degenerate boxes.
    pub fn area(self) -> i64 {
        if self.is_ordered() {
            (self.x2 - self.x1) * (self.y2 - self.y1)
        } else {
            0
        }
    }
}

/// Which action the answer requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tool {
    Crop,
    Final,
}

impl std::fmt::Display for Tool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tool::Crop => f.write_str("crop"),
            Tool::Final => f.write_str("final"),
        }
    }
}

/// Validated payload of the `<answer>` block.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerBlock {
    pub bbox: BBox,
    pub rating: f64,
    pub tool: Tool,
}

/// The four labeled sections of the `<think>` block.
///
/// Sections that are not found are left as empty strings; whether the block
/// is acceptable is the format reward's call, not the parser's, so a think
/// block with missing sections still parses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ThinkBlock {
    /// First section: the quality summary ("Image Quality Summary" on the
    /// full-image turn, "Crop Inspection Summary" on the crop turn).
    pub summary: String,
    /// "Directions for Improvement" — required for the format reward.
    pub improvements: String,
    /// "Issues to Avoid" — required for the format reward.
    pub issues: String,
    /// Closing "(Final) Decision & Rationale" section.
    pub decision_rationale: String,
    /// Verbatim inner text of the think block.
    pub raw: String,
}

impl ThinkBlock {
    /// Both mandatory sections were found, in order, with non-empty bodies.
    pub fn has_required_sections(&self) -> bool {
        !self.improvements.trim().is_empty() && !self.issues.trim().is_empty()
    }
}

/// Fully parsed and validated response for one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredResponse {
    pub think: ThinkBlock,
    pub answer: AnswerBlock,
    /// 1-based turn index the response was produced for.
    pub turn_index: usize,
}

/// Reasons a response fails to parse. Every variant maps to a format-reward
/// zero; none of them aborts a rollout.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    /// A tag is missing, duplicated, or out of order.
    #[error("malformed tag structure: {0}")]
    MissingTag(String),
    /// The answer payload is not a single well-formed JSON object.
    #[error("bad answer JSON: {0}")]
    BadJson(String),
    /// A required answer key is absent.
    #[error("missing answer key {0:?}")]
    MissingKey(&'static str),
    /// Rating outside `[1.0, 5.0]` or finer than two decimal places.
    #[error("rating {0} outside the accepted scale")]
    RatingOutOfRange(String),
    /// Box is not 4 integers, degenerate, inconsistent with the tool, or
    /// entirely outside the image.
    #[error("bad bounding box: {0}")]
    BadBbox(String),
    /// Tool choice violates the turn protocol (crop on the last turn, or a
    /// turn index beyond the protocol).
    #[error("turn protocol violation: {0}")]
    ProtocolViolation(String),
}

fn section_regexes() -> &'static [Regex; 4] {
    static RE: OnceLock<[Regex; 4]> = OnceLock::new();
    RE.get_or_init(|| {
        let make = |label: &str| {
            Regex::new(&format!(
                r"(?im)^[\s\d().*#\-]*{label}\s*\**\s*:\s*\**"
            ))
            .expect("static section regex compiles")
        };
        [
            make(r"(?:image\s+quality\s+summary|crop\s+inspection\s+summary)"),
            make(r"directions\s+for\s+improvement"),
            make(r"issues\s+to\s+avoid"),
            make(r"(?:final\s+)?decision\s*&\s*rationale"),
        ]
    })
}

/// Splits the raw think text into the four canonical sections.
///
/// Headings are matched case-insensitively at line starts (allowing list
/// numbering and markdown emphasis) and must appear in canonical order; a
/// heading that appears out of order is simply not recognized, which the
/// format reward then treats as a missing section.
pub fn parse_think_block(raw: &str) -> ThinkBlock {
    let res = section_regexes();
    let mut cursor = 0usize;
    let mut spans: [Option<(usize, usize)>; 4] = [None; 4];
    for (i, re) in res.iter().enumerate() {
        if let Some(m) = re.find_at(raw, cursor) {
            spans[i] = Some((m.start(), m.end()));
            cursor = m.end();
        }
    }
    let mut sections = [const { String::new() }; 4];
    for i in 0..4 {
        let Some((_, body_start)) = spans[i] else {
            continue;
        };
        let body_end = spans[i + 1..]
            .iter()
            .flatten()
            .map(|(s, _)| *s)
            .next()
            .unwrap_or(raw.len());
        sections[i] = raw[body_start..body_end].trim().to_string();
    }
    let [summary, improvements, issues, decision_rationale] = sections;
    ThinkBlock {
        summary,
        improvements,
        issues,
        decision_rationale,
        raw: raw.to_string(),
    }
}

/// Extracts the first balanced `{…}` JSON object from `s`; anything other
/// than whitespace before or after it is a failure.
fn extract_json_object(s: &str) -> Result<&str, ParseError> {
    let trimmed_start = s.trim_start();
    if !trimmed_start.starts_with('{') {
        return Err(ParseError::BadJson(
            "answer does not start with a JSON object".to_string(),
        ));
    }
    let offset = s.len() - trimmed_start.len();
    let bytes = trimmed_start.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    let rest = &trimmed_start[i + 1..];
                    if !rest.trim().is_empty() {
                        return Err(ParseError::BadJson(format!(
                            "trailing content after answer object: {:?}",
                            rest.trim().chars().take(20).collect::<String>()
                        )));
                    }
                    return Ok(&s[offset..offset + i + 1]);
                }
            }
            _ => {}
        }
    }
    Err(ParseError::BadJson("unbalanced braces in answer".to_string()))
}

/// True when `rating` is representable with at most two decimal places
/// (up to float noise from parsing).
fn is_two_decimal(rating: f64) -> bool {
    (rating * 100.0 - (rating * 100.0).round()).abs() <= 1e-6
}

impl AnswerBlock {
    /// Validates a decoded JSON value against the answer schema.
    ///
    /// `image_dims`, when known, is used for one geometric sanity check: a
    /// crop box that does not intersect the image at all is unexecutable and
    /// rejected. Boxes that merely overshoot the borders are accepted here
    /// and clamped later by [`TurnProtocolState::apply_crop`].
    pub fn from_json_value(
        value: &serde_json::Value,
        image_dims: Option<(u32, u32)>,
    ) -> Result<AnswerBlock, ParseError> {
        let obj = value
            .as_object()
            .ok_or_else(|| ParseError::BadJson("answer is not a JSON object".to_string()))?;
        for key in obj.keys() {
            if !matches!(key.as_str(), "bbox_2d" | "rating" | "tool") {
                return Err(ParseError::BadJson(format!("unexpected answer key {key:?}")));
            }
        }

        let bbox_value = obj.get("bbox_2d").ok_or(ParseError::MissingKey("bbox_2d"))?;
        let rating_value = obj.get("rating").ok_or(ParseError::MissingKey("rating"))?;
        let tool_value = obj.get("tool").ok_or(ParseError::MissingKey("tool"))?;

        let tool = match tool_value.as_str() {
            Some("crop") => Tool::Crop,
            Some("final") => Tool::Final,
            Some(other) => {
                return Err(ParseError::BadJson(format!("unknown tool {other:?}")));
            }
            None => return Err(ParseError::BadJson("tool is not a string".to_string())),
        };

        let arr = bbox_value
            .as_array()
            .ok_or_else(|| ParseError::BadBbox("bbox_2d is not an array".to_string()))?;
        if arr.len() != 4 {
            return Err(ParseError::BadBbox(format!(
                "bbox_2d has {} elements, expected 4",
                arr.len()
            )));
        }
        let mut coords = [0i64; 4];
        for (i, v) in arr.iter().enumerate() {
            coords[i] = v.as_i64().ok_or_else(|| {
                ParseError::BadBbox(format!("bbox_2d[{i}] is not an integer"))
            })?;
        }
        let bbox = BBox::from_array(coords);

        let rating = rating_value
            .as_f64()
            .ok_or_else(|| ParseError::BadJson("rating is not a number".to_string()))?;
        if !rating.is_finite() || !(RATING_MIN..=RATING_MAX).contains(&rating) {
            return Err(ParseError::RatingOutOfRange(format!("{rating}")));
        }
        if !is_two_decimal(rating) {
            return Err(ParseError::RatingOutOfRange(format!(
                "{rating} has more than two decimal places"
            )));
        }

        match tool {
            Tool::Final => {
                if !bbox.is_sentinel() {
                    return Err(ParseError::BadBbox(
                        "final answers must carry the all-zero box".to_string(),
                    ));
                }
            }
            Tool::Crop => {
                if !bbox.is_ordered() {
                    return Err(ParseError::BadBbox(format!(
                        "crop box {:?} is not strictly ordered",
                        bbox.to_array()
                    )));
                }
                if let Some((w, h)) = image_dims {
                    if !bbox.intersects_image(w, h) {
                        return Err(ParseError::BadBbox(format!(
                            "crop box {:?} lies entirely outside a {w}x{h} image",
                            bbox.to_array()
                        )));
                    }
                }
            }
        }

        Ok(AnswerBlock { bbox, rating, tool })
    }

    /// Canonical JSON value (`bbox_2d`, `rating`, `tool` in that order).
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "bbox_2d": self.bbox.to_array(),
            "rating": self.rating,
            "tool": self.tool.to_string(),
        })
    }
}

/// Locates the single think and answer blocks; any duplication, omission,
/// or reordering of the four tags is a [`ParseError::MissingTag`].
fn split_blocks(text: &str) -> Result<(&str, &str), ParseError> {
    fn find_once(text: &str, tag: &str) -> Result<usize, ParseError> {
        let first = text
            .find(tag)
            .ok_or_else(|| ParseError::MissingTag(format!("{tag} not found")))?;
        if text[first + tag.len()..].contains(tag) {
            return Err(ParseError::MissingTag(format!("{tag} appears more than once")));
        }
        Ok(first)
    }
    let think_open = find_once(text, "<think>")?;
    let think_close = find_once(text, "</think>")?;
    let answer_open = find_once(text, "<answer>")?;
    let answer_close = find_once(text, "</answer>")?;
    if !(think_open < think_close && think_close < answer_open && answer_open < answer_close) {
        return Err(ParseError::MissingTag(
            "tags out of order: expected <think>…</think> before <answer>…</answer>".to_string(),
        ));
    }
    let think = &text[think_open + "<think>".len()..think_close];
    let answer = &text[answer_open + "<answer>".len()..answer_close];
    Ok((think, answer))
}

/// Parses one turn's raw response text.
///
/// `turn_index` is 1-based; `image_dims` is the size of the image the turn
/// was conditioned on. On the last protocol turn only final answers are
/// legal. The function is total over arbitrary input text: it never panics,
/// it only returns errors.
pub fn parse_response(
    text: &str,
    image_dims: (u32, u32),
    turn_index: usize,
) -> Result<StructuredResponse, ParseError> {
    parse_response_opt(text, Some(image_dims), turn_index)
}

/// [`parse_response`] for hosts that did not record the image size: the
/// crop-box/image intersection check is skipped, everything else is
/// identical.
pub fn parse_response_opt(
    text: &str,
    image_dims: Option<(u32, u32)>,
    turn_index: usize,
) -> Result<StructuredResponse, ParseError> {
    if turn_index == 0 || turn_index > MAX_TURNS {
        return Err(ParseError::ProtocolViolation(format!(
            "turn index {turn_index} outside 1..={MAX_TURNS}"
        )));
    }
    let (think_raw, answer_raw) = split_blocks(text)?;
    let think = parse_think_block(think_raw);
    let object_text = extract_json_object(answer_raw)?;
    let value: serde_json::Value = serde_json::from_str(object_text)
        .map_err(|e| ParseError::BadJson(e.to_string()))?;
    let answer = AnswerBlock::from_json_value(&value, image_dims)?;
    if turn_index == MAX_TURNS && answer.tool == Tool::Crop {
        return Err(ParseError::ProtocolViolation(format!(
            "crop requested on the final turn ({turn_index})"
        )));
    }
    Ok(StructuredResponse {
        think,
        answer,
        turn_index,
    })
}

/// Binary format reward over a parse result.
///
/// Returns `1.0` exactly when the response parsed and its think block
/// carries non-empty "Directions for Improvement" and "Issues to Avoid"
/// sections; `0.0` otherwise. Total over all inputs.
pub fn format_reward(parse_result: &Result<StructuredResponse, ParseError>) -> f64 {
    match parse_result {
        Ok(resp) if resp.think.has_required_sections() => 1.0,
        _ => 0.0,
    }
}

/// Renders a response back to canonical two-block text. Parsing the output
/// reproduces the same sections, answer, and turn index.
pub fn serialize_response(resp: &StructuredResponse) -> String {
    let (summary_label, decision_label) = if resp.turn_index >= 2 {
        ("Crop Inspection Summary", "Final Decision & Rationale")
    } else {
        ("Image Quality Summary", "Decision & Rationale")
    };
    let answer = serde_json::to_string(&resp.answer.to_json()).expect("answer JSON serializes");
    format!(
        "<think>\n1) {summary_label}: {}\n2) Directions for Improvement: {}\n3) Issues to Avoid: {}\n4) {decision_label}: {}\n</think>\n<answer>{answer}</answer>",
        resp.think.summary,
        resp.think.improvements,
        resp.think.issues,
        resp.think.decision_rationale,
    )
}

/// Errors from the turn protocol state machine.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("crop requested on turn {turn} but the protocol allows at most {MAX_TURNS} turns")]
    CropAtMaxTurns { turn: usize },
    #[error("crop box {bbox:?} has no area after clamping to {width}x{height}")]
    EmptyCrop {
        bbox: [i64; 4],
        width: u32,
        height: u32,
    },
}

/// A crop the host should execute before the next turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRequest {
    /// Clamped, strictly ordered box inside the image.
    pub bbox: BBox,
    /// 1-based index of the turn that will consume the crop.
    pub turn_index: usize,
}

/// Result of feeding one answer to the protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CropOutcome {
    /// Execute this crop and run another turn.
    Crop(CropRequest),
    /// The rollout is complete with this rating.
    Finished { rating: f64 },
}

/// Per-rollout protocol state: one owner, advanced turn by turn.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnProtocolState {
    image_dims: (u32, u32),
    turn: usize,
    pending_crop: Option<BBox>,
}

impl TurnProtocolState {
    pub fn new(image_dims: (u32, u32)) -> Self {
        TurnProtocolState {
            image_dims,
            turn: 1,
            pending_crop: None,
        }
    }

    /// 1-based index of the turn currently awaiting a response.
    pub fn turn_index(&self) -> usize {
        self.turn
    }

    /// Crop awaiting execution between turns, if any.
    pub fn pending_crop(&self) -> Option<BBox> {
        self.pending_crop
    }

    /// Advances the protocol with a validated answer.
    ///
    /// Crop boxes are clamped into the image here; a crop that would clamp
    /// to zero area is rejected rather than silently emptied.
    pub fn apply_crop(&mut self, answer: &AnswerBlock) -> Result<CropOutcome, ProtocolError> {
        match answer.tool {
            Tool::Final => {
                self.pending_crop = None;
                Ok(CropOutcome::Finished {
                    rating: answer.rating,
                })
            }
            Tool::Crop => {
                if self.turn >= MAX_TURNS {
                    return Err(ProtocolError::CropAtMaxTurns { turn: self.turn });
                }
                let (w, h) = self.image_dims;
                let clamped = answer.bbox.clamp_to(w, h);
                if !clamped.is_ordered() {
                    return Err(ProtocolError::EmptyCrop {
                        bbox: answer.bbox.to_array(),
                        width: w,
                        height: h,
                    });
                }
                self.turn += 1;
                self.pending_crop = Some(clamped);
                Ok(CropOutcome::Crop(CropRequest {
                    bbox: clamped,
                    turn_index: self.turn,
                }))
            }
        }
    }
}
