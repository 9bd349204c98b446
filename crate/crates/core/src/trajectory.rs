//! Tagged transcript parsing for multi-step tool-integrated reasoning.
//!
//! A transcript interleaves reasoning, tool invocations and environment
//! observations before a final answer:
//!
//! ```text
//! <reasoning>..</reasoning><tool_call>..</tool_call><observation>..</observation>
//! <reasoning>..</reasoning><answer>..</answer>
//! ```
//!
//! Parsing is total. Malformed input never errors; it produces a best-effort
//! [`Trajectory`] plus a [`ParseReport`] whose flags feed the process and
//! format rewards.
//!
//! Observation blocks are inserted by the environment, so their content is
//! opaque: tags inside an observation are not interpreted and do not count
//! against format compliance.

use serde::{Deserialize, Serialize};

/// Names of the four tag pairs recognised by the parser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagScheme {
    pub reasoning: String,
    pub tool_call: String,
    pub observation: String,
    pub answer: String,
}

impl Default for TagScheme {
    fn default() -> Self {
        Self {
            reasoning: "reasoning".into(),
            tool_call: "tool_call".into(),
            observation: "observation".into(),
            answer: "answer".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagKind {
    Reasoning,
    ToolCall,
    Observation,
    Answer,
}

impl TagScheme {
    pub fn name(&self, kind: TagKind) -> &str {
        match kind {
            TagKind::Reasoning => &self.reasoning,
            TagKind::ToolCall => &self.tool_call,
            TagKind::Observation => &self.observation,
            TagKind::Answer => &self.answer,
        }
    }

    pub fn open(&self, kind: TagKind) -> String {
        format!("<{}>", self.name(kind))
    }

    pub fn close(&self, kind: TagKind) -> String {
        format!("</{}>", self.name(kind))
    }

    const KINDS: [TagKind; 4] = [
        TagKind::Reasoning,
        TagKind::ToolCall,
        TagKind::Observation,
        TagKind::Answer,
    ];

    /// Recognises a tag starting at byte `at`. Returns (kind, is_close, tag length).
    fn match_tag(&self, text: &str, at: usize) -> Option<(TagKind, bool, usize)> {
        let rest = &text[at..];
        let (is_close, body) = if let Some(b) = rest.strip_prefix("</") {
            (true, b)
        } else if let Some(b) = rest.strip_prefix('<') {
            (false, b)
        } else {
            return None;
        };
        for kind in Self::KINDS {
            let name = self.name(kind);
            if body.starts_with(name) && body[name.len()..].starts_with('>') {
                let prefix = if is_close { 2 } else { 1 };
                return Some((kind, is_close, prefix + name.len() + 1));
            }
        }
        None
    }
}

/// One intermediate step: reasoning, the raw tool invocation and what the
/// environment returned for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallStep {
    pub reasoning: String,
    pub tool_call: String,
    pub observation: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalStep {
    pub reasoning: String,
    /// Present iff an answer tag pair was found with non-empty content.
    pub answer: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<ToolCallStep>,
    pub final_step: FinalStep,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagError {
    /// Byte offset into the raw transcript.
    pub position: usize,
    pub description: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub all_tool_calls_parseable: bool,
    pub answer_parseable: bool,
    /// Every opened tag is closed, tags nest properly and no generated
    /// content sits outside a recognised tag.
    pub format_complete: bool,
    pub tag_errors: Vec<TagError>,
}

impl Trajectory {
    /// Renders the trajectory back into canonical tagged text.
    pub fn to_tagged_text(&self, scheme: &TagScheme) -> String {
        let mut out = String::new();
        let mut push = |kind: TagKind, body: &str| {
            out.push_str(&scheme.open(kind));
            out.push_str(body);
            out.push_str(&scheme.close(kind));
        };
        for step in &self.steps {
            if !step.reasoning.is_empty() {
                push(TagKind::Reasoning, &step.reasoning);
            }
            push(TagKind::ToolCall, &step.tool_call);
            if !step.observation.is_empty() {
                push(TagKind::Observation, &step.observation);
            }
        }
        if !self.final_step.reasoning.is_empty() {
            push(TagKind::Reasoning, &self.final_step.reasoning);
        }
        if let Some(answer) = &self.final_step.answer {
            push(TagKind::Answer, answer);
        }
        out
    }
}

/// Returns the final answer with surrounding whitespace stripped.
pub fn extract_answer(traj: &Trajectory) -> Option<String> {
    traj.final_step
        .answer
        .as_deref()
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(str::to_owned)
}

struct OpenTag {
    kind: TagKind,
    pos: usize,
    content_start: usize,
    has_inner_tags: bool,
}

struct Span {
    kind: TagKind,
    open_pos: usize,
    content: std::ops::Range<usize>,
    has_inner_tags: bool,
}

/// Parses a raw transcript. Never fails; problems are reported in the
/// returned [`ParseReport`].
pub fn parse_trajectory(raw: &str, scheme: &TagScheme) -> (Trajectory, ParseReport) {
    let mut errors: Vec<TagError> = Vec::new();
    let mut err = |position: usize, description: String| {
        errors.push(TagError {
            position,
            description,
        })
    };
    let mut stack: Vec<OpenTag> = Vec::new();
    let mut spans: Vec<Span> = Vec::new();
    let mut tool_calls_ok = true;
    let mut saw_tag = false;

    let mut text_start = 0usize;
    let mut i = 0usize;
    while i < raw.len() {
        let Some((kind, is_close, len)) = raw
            .as_bytes()
            .get(i)
            .filter(|&&b| b == b'<')
            .and_then(|_| scheme.match_tag(raw, i))
        else {
            i += raw[i..].chars().next().map_or(1, char::len_utf8);
            continue;
        };
        saw_tag = true;

        // Text run preceding this tag.
        if stack.is_empty() && !raw[text_start..i].trim().is_empty() {
            err(text_start, "content outside of any tag".into());
        }

        if kind == TagKind::Observation && !is_close {
            // Opaque block: skip to the matching close tag.
            let content_start = i + len;
            let close = scheme.close(TagKind::Observation);
            for open in &mut stack {
                open.has_inner_tags = true;
            }
            match raw[content_start..].find(&close) {
                Some(off) => {
                    let open = scheme.open(TagKind::Observation);
                    if let Some(inner) = raw[content_start..content_start + off].find(&open) {
                        err(content_start + inner, format!("nested {open}"));
                    }
                    spans.push(Span {
                        kind,
                        open_pos: i,
                        content: content_start..content_start + off,
                        has_inner_tags: false,
                    });
                    i = content_start + off + close.len();
                }
                None => {
                    err(i, format!("unclosed {}", scheme.open(kind)));
                    i = raw.len();
                }
            }
            text_start = i;
            continue;
        }

        if !is_close {
            if stack.iter().any(|o| o.kind == kind) {
                err(i, format!("nested {}", scheme.open(kind)));
                if kind == TagKind::ToolCall {
                    tool_calls_ok = false;
                }
            }
            for open in &mut stack {
                open.has_inner_tags = true;
            }
            stack.push(OpenTag {
                kind,
                pos: i,
                content_start: i + len,
                has_inner_tags: false,
            });
        } else if let Some(idx) = stack.iter().rposition(|o| o.kind == kind) {
            for unclosed in stack.drain(idx + 1..).rev() {
                err(unclosed.pos, format!("unclosed {}", scheme.open(unclosed.kind)));
                if unclosed.kind == TagKind::ToolCall {
                    tool_calls_ok = false;
                }
            }
            let open = stack.pop().expect("index found above");
            spans.push(Span {
                kind,
                open_pos: open.pos,
                content: open.content_start..i,
                has_inner_tags: open.has_inner_tags,
            });
        } else {
            err(i, format!("unmatched {}", scheme.close(kind)));
            if kind == TagKind::ToolCall {
                tool_calls_ok = false;
            }
        }
        i += len;
        text_start = i;
    }
    if stack.is_empty() && !raw[text_start..].trim().is_empty() {
        err(text_start, "content outside of any tag".into());
    }
    for unclosed in stack.drain(..) {
        err(unclosed.pos, format!("unclosed {}", scheme.open(unclosed.kind)));
        if unclosed.kind == TagKind::ToolCall {
            tool_calls_ok = false;
        }
    }
    if !saw_tag {
        err(0, "no recognised tags".into());
    }

    spans.sort_by_key(|s| s.open_pos);

    let mut steps: Vec<ToolCallStep> = Vec::new();
    let mut final_step = FinalStep::default();
    let mut pending: Vec<&str> = Vec::new();
    let mut answered = false;
    let mut observation_slot = false;
    for span in &spans {
        let body = raw[span.content.clone()].trim();
        match span.kind {
            TagKind::Reasoning => {
                if !body.is_empty() {
                    pending.push(body);
                }
            }
            TagKind::ToolCall => {
                observation_slot = false;
                if body.is_empty() || span.has_inner_tags {
                    err(span.open_pos, "unparseable tool call payload".into());
                    tool_calls_ok = false;
                    continue;
                }
                if pending.is_empty() {
                    err(span.open_pos, "tool call without preceding reasoning".into());
                }
                steps.push(ToolCallStep {
                    reasoning: pending.join("\n"),
                    tool_call: body.to_owned(),
                    observation: String::new(),
                });
                pending.clear();
                observation_slot = true;
            }
            TagKind::Observation => {
                if observation_slot {
                    if let Some(step) = steps.last_mut() {
                        step.observation = body.to_owned();
                    }
                    observation_slot = false;
                }
            }
            TagKind::Answer => {
                observation_slot = false;
                if answered {
                    err(span.open_pos, "duplicate answer block".into());
                    continue;
                }
                answered = true;
                final_step.reasoning = pending.join("\n");
                pending.clear();
                if body.is_empty() || span.has_inner_tags {
                    err(span.open_pos, "unparseable answer".into());
                } else {
                    final_step.answer = Some(body.to_owned());
                }
            }
        }
    }
    if !answered {
        final_step.reasoning = pending.join("\n");
    }

    errors.sort_by_key(|e| e.position);
    let report = ParseReport {
        all_tool_calls_parseable: tool_calls_ok,
        answer_parseable: final_step.answer.is_some(),
        format_complete: errors.is_empty(),
        tag_errors: errors,
    };
    let traj = Trajectory {
        steps,
        final_step,
        raw: raw.to_owned(),
    };
    (traj, report)
}
