//! Lossless reader and writer for textual SASS listings.
//!
//! Accepted instruction lines look like
//! `[B------:R-:W2:-:S02] /*0090*/ @!P0 LDG.E R0, [R2.64] ; /* 0x... */`
//! where the control block, address comment, guard and trailing comment are
//! all optional. Every other line (labels, directives, comments, headers) is
//! kept verbatim and re-emitted in place.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::ir::{ControlCode, Guard, Instruction, Kernel, LineKind, Operand, Reg, RegFile, TextLine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParseDiagnostic {
    /// 1-based source line.
    pub line: usize,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for ParseDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "line {}: {sev}: {}", self.line, self.message)
    }
}

/// Parse failure: at least one error diagnostic, plus any warnings.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{} error(s) while parsing; first: {}", self.error_count(), self.first_error())]
pub struct ParseErrors {
    pub diagnostics: Vec<ParseDiagnostic>,
}

impl ParseErrors {
    fn error_count(&self) -> usize {
        self.diagnostics
            .iter()
            .filter(|d| d.severity == Severity::Error)
            .count()
    }

    fn first_error(&self) -> String {
        self.diagnostics
            .iter()
            .find(|d| d.severity == Severity::Error)
            .map(ToString::to_string)
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub kernel: Kernel,
    pub warnings: Vec<ParseDiagnostic>,
}

enum LineParse {
    Instruction(Instruction, Vec<String>),
    NotInstruction,
    Error(String),
}

/// Skips whitespace and closed `/* ... */` comments.
fn skip_inline_comments(mut s: &str) -> &str {
    loop {
        s = s.trim_start();
        match s.strip_prefix("/*").and_then(|r| r.find("*/").map(|e| &r[e + 2..])) {
            Some(rest) => s = rest,
            None => return s,
        }
    }
}

/// Splits at commas outside of brackets.
fn split_operands(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&text[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&text[start..]);
    out
}

fn is_mnemonic(tok: &str) -> bool {
    let mut bytes = tok.bytes();
    matches!(bytes.next(), Some(b) if b.is_ascii_uppercase())
        && bytes.all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_' || b == b'.')
}

fn parse_line(line: &str, line_no: usize) -> LineParse {
    let mut rest = line.trim_start();
    let mut control = None;
    if rest.starts_with('[') {
        let Some(end) = rest.find(']') else {
            return LineParse::Error("unterminated control code".into());
        };
        match rest[..=end].parse::<ControlCode>() {
            Ok(cc) => control = Some(cc),
            Err(e) => return LineParse::Error(format!("malformed control code: {e}")),
        }
        rest = &rest[end + 1..];
    }
    rest = skip_inline_comments(rest);

    let Some(semi) = rest.find(';') else {
        return if control.is_some() {
            LineParse::Error("instruction is missing its terminating ';'".into())
        } else {
            LineParse::NotInstruction
        };
    };
    let body = rest[..semi].trim();

    let (predicate, body) = match body.strip_prefix('@') {
        Some(p) => {
            let (tok, after) = p.split_once(char::is_whitespace).unwrap_or((p, ""));
            let (negated, name) = match tok.strip_prefix('!') {
                Some(n) => (true, n),
                None => (false, tok),
            };
            match Reg::parse(name) {
                Some(reg) if matches!(reg.file, RegFile::Predicate | RegFile::UniformPredicate) => {
                    (Some(Guard { reg, negated }), after.trim_start())
                }
                _ => {
                    return if control.is_some() {
                        LineParse::Error(format!("bad predicate guard `@{tok}`"))
                    } else {
                        LineParse::NotInstruction
                    }
                }
            }
        }
        None => (None, body),
    };

    let (mnemonic, operand_text) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
    if !is_mnemonic(mnemonic) {
        return if control.is_some() {
            LineParse::Error(format!("expected a mnemonic, found `{mnemonic}`"))
        } else {
            LineParse::NotInstruction
        };
    }

    let mut warnings = Vec::new();
    let operand_text = operand_text.trim();
    let operands: Vec<Operand> = if operand_text.is_empty() {
        Vec::new()
    } else {
        split_operands(operand_text)
            .into_iter()
            .map(|raw| {
                let op = Operand::parse(raw.trim());
                if op.is_opaque() {
                    warnings.push(format!("unrecognized operand `{}` kept verbatim", raw.trim()));
                }
                op
            })
            .collect()
    };

    LineParse::Instruction(
        Instruction::new(
            line.to_string(),
            control,
            predicate,
            mnemonic.to_string(),
            operands,
            line_no,
        ),
        warnings,
    )
}

fn is_label(t: &str) -> bool {
    let Some(colon) = t.find(':') else {
        return false;
    };
    let (name, after) = (&t[..colon], t[colon + 1..].trim());
    let ident = name.strip_prefix('.').unwrap_or(name);
    let mut chars = ident.chars();
    let head_ok = matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '$');
    head_ok
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$'))
        && (after.is_empty() || after.starts_with("//") || after.starts_with("/*"))
}

/// Parses a listing, returning the kernel and any warnings.
pub fn parse(text: &str) -> Result<Parsed, ParseErrors> {
    let normalized = normalize_newlines(text);
    let mut lines: Vec<&str> = normalized.split('\n').collect();
    let trailing_newline = normalized.ends_with('\n');
    if trailing_newline || normalized.is_empty() {
        lines.pop();
    }

    let mut schedule: Vec<Instruction> = Vec::new();
    let mut interleaved: BTreeMap<usize, Vec<TextLine>> = BTreeMap::new();
    let mut diagnostics = Vec::new();
    let mut name = None;
    let mut in_block_comment = false;

    for (idx, line) in lines.iter().enumerate() {
        let line_no = idx + 1;
        let t = line.trim();
        let mut keep = |kind: LineKind| {
            interleaved.entry(schedule.len()).or_default().push(TextLine {
                text: line.to_string(),
                kind,
            })
        };

        if in_block_comment {
            if t.contains("*/") {
                in_block_comment = false;
            }
            keep(LineKind::Comment);
            continue;
        }
        if t.is_empty() {
            keep(LineKind::Blank);
            continue;
        }
        if t.starts_with("//") {
            keep(LineKind::Comment);
            continue;
        }

        match parse_line(line, line_no) {
            LineParse::Instruction(ins, warnings) => {
                diagnostics.extend(warnings.into_iter().map(|message| ParseDiagnostic {
                    line: line_no,
                    severity: Severity::Warning,
                    message,
                }));
                schedule.push(ins);
            }
            LineParse::Error(message) => diagnostics.push(ParseDiagnostic {
                line: line_no,
                severity: Severity::Error,
                message,
            }),
            LineParse::NotInstruction => {
                if t.starts_with("/*") {
                    if !t[2..].contains("*/") {
                        in_block_comment = true;
                    }
                    keep(LineKind::Comment);
                } else if is_label(t) {
                    if name.is_none() {
                        name = t
                            .strip_prefix(".text.")
                            .and_then(|s| s.split(':').next())
                            .map(str::to_string);
                    }
                    keep(LineKind::Label);
                } else {
                    keep(LineKind::Directive);
                }
            }
        }
    }

    if diagnostics.iter().any(|d| d.severity == Severity::Error) {
        return Err(ParseErrors { diagnostics });
    }
    Ok(Parsed {
        kernel: Kernel::new(
            name.unwrap_or_else(|| "kernel".to_string()),
            schedule,
            interleaved,
            trailing_newline,
        ),
        warnings: diagnostics,
    })
}

/// Parses a listing, discarding warnings.
pub fn parse_kernel(text: &str) -> Result<Kernel, ParseErrors> {
    parse(text).map(|p| p.kernel)
}

/// Writes the kernel back as text. Instructions are emitted in schedule
/// order; preserved lines stay in their gaps.
pub fn serialize_kernel(k: &Kernel) -> String {
    let mut lines: Vec<&str> = Vec::new();
    for (gap, ins) in k.schedule().iter().enumerate() {
        lines.extend(k.lines_before(gap).iter().map(|l| l.text.as_str()));
        lines.push(ins.text());
    }
    lines.extend(k.lines_before(k.len()).iter().map(|l| l.text.as_str()));
    let mut out = lines.join("\n");
    if k.trailing_newline() {
        out.push('\n');
    }
    out
}

/// CRLF and lone CR become LF.
pub fn normalize_newlines(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LineError {
    #[error("not an instruction line")]
    NotInstruction,
    #[error("{0}")]
    Malformed(String),
}

impl FromStr for Instruction {
    type Err = LineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match parse_line(s, 1) {
            LineParse::Instruction(ins, _) => Ok(ins),
            LineParse::NotInstruction => Err(LineError::NotInstruction),
            LineParse::Error(e) => Err(LineError::Malformed(e)),
        }
    }
}
